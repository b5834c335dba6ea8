use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use fmlora::harness::ablation::{self, Axis};
use fmlora::harness::record::write_atomic;
use fmlora::harness::{load_checkpoint, save_checkpoint, stream_for, Profile, RunConfig, RunRecord, RunState};
use fmlora::verify::{run_battery, Hooks};

/// Caps the number of ablation cells trained concurrently.
const WORKERS_ENV: &str = "FMLORA_WORKERS";
const CHECKPOINT_FILE: &str = "state.ckpt";

#[derive(Parser)]
#[command(name = "fmlora", version, about = "Continual learning with factorized low-rank adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on every task of a stream and write the run record.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Run an ablation grid and write a comparison table.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// rank_fixed_vs_drs, dmp_m_sweep or task_length_sweep.
        #[arg(long)]
        axis: Axis,
        /// Number of seeds per cell, counting up from the base seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Run the invariant battery and print one line per property.
    Verify {
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Pretty-print a run record (a record.json file or its directory).
    Show { path: PathBuf },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file layered over the profile defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted-key override such as `drs.tau=0.5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// fast or paper-shape.
    #[arg(long, default_value = "fast")]
    profile: String,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let profile: Profile = self.profile.parse()?;
        let document = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(out) = &self.out {
            overrides.push(format!("out_dir=\"{}\"", out.display().to_string().replace('\\', "\\\\")));
        }
        Ok(RunConfig::load(&RunConfig::profile(profile), document.as_deref(), &overrides)?)
    }
}

/// Creates `dir` and proves it writable before any training starts.
fn prepare_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let probe = dir.join(format!(".write-probe-{}", std::process::id()));
    std::fs::write(&probe, b"").with_context(|| format!("output directory {} is not writable", dir.display()))?;
    std::fs::remove_file(&probe).ok();
    Ok(())
}

fn cmd_run(args: &ConfigArgs, resume: Option<&Path>) -> Result<()> {
    let (mut state, out) = match resume {
        Some(path) => {
            let state = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&state.config.out_dir));
            (state, out)
        }
        None => {
            let config = args.resolve()?;
            let out = PathBuf::from(&config.out_dir);
            let stream = stream_for(&config)?;
            (RunState::new(&config, &stream)?, out)
        }
    };
    prepare_out_dir(&out)?;
    let stream = stream_for(&state.config)?;
    let total = state.config.stream.num_tasks;
    while !state.is_complete() {
        state.run_next_task(&stream)?;
        let log = state.record.tasks.last().expect("task just logged");
        let row = state.record.accuracy.last().expect("row just filled");
        eprintln!(
            "task {}/{}  rank {}  mean seen-task accuracy {:.4}",
            state.tasks_completed,
            total,
            log.rank.map_or("-".into(), |r| r.to_string()),
            row.iter().sum::<f64>() / row.len() as f64
        );
        save_checkpoint(&state, &out.join(CHECKPOINT_FILE))?;
    }
    let record = state.into_record()?;
    record.write_to_dir(&out)?;
    print!("{}", record.summary());
    println!("wrote {}", out.join("record.json").display());
    Ok(())
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var(WORKERS_ENV) {
        let n: usize = raw
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("{WORKERS_ENV} must be a positive integer, got `{raw}`"))?;
        builder = builder.num_threads(n);
    }
    Ok(builder.build()?)
}

fn cmd_ablate(args: &ConfigArgs, axis: Axis, seeds: u64) -> Result<()> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let base = args.resolve()?;
    let out = PathBuf::from(&base.out_dir);
    prepare_out_dir(&out)?;
    let seed_list: Vec<u64> = (0..seeds).map(|i| base.seed.wrapping_add(i)).collect();
    let cells = ablation::cells(axis, &base, &seed_list);
    let jobs: Vec<(usize, &RunConfig)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, cell)| cell.configs.iter().map(move |c| (i, c)))
        .collect();
    let results: Vec<(usize, RunRecord)> = worker_pool()?.install(|| {
        jobs.par_iter()
            .map(|&(i, config)| -> Result<(usize, RunRecord)> {
                let record = fmlora::harness::run_sequence(&stream_for(config)?, config)?;
                Ok((i, record))
            })
            .collect::<Result<_>>()
    })?;
    let rows: Vec<_> = cells
        .iter()
        .enumerate()
        .map(|(i, cell)| {
            let records: Vec<RunRecord> =
                results.iter().filter(|(j, _)| *j == i).map(|(_, r)| r.clone()).collect();
            ablation::summarize(&cell.label, &records)
        })
        .collect();
    let name = format!("ablation_{}", axis_name(axis));
    for (i, record) in &results {
        let dir = out.join(&name).join(slug(&cells[*i].label)).join(format!("seed-{}", record.seed));
        record.write_to_dir(&dir)?;
    }
    let text = ablation::render_text(&rows);
    write_atomic(&out.join(format!("{name}.txt")), text.as_bytes())?;
    write_atomic(&out.join(format!("{name}.csv")), ablation::render_csv(&rows).as_bytes())?;
    write_atomic(&out.join(format!("{name}.config.toml")), base.to_toml().as_bytes())?;
    print!("{text}");
    println!("wrote {}", out.join(format!("{name}.txt")).display());
    Ok(())
}

/// `fixed r=2` → `fixed_r_2`.
fn slug(label: &str) -> String {
    let mut out = String::new();
    for c in label.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c);
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out
}

fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::RankFixedVsDrs => "rank_fixed_vs_drs",
        Axis::DmpMSweep => "dmp_m_sweep",
        Axis::TaskLengthSweep => "task_length_sweep",
    }
}

fn cmd_verify(corrupt_gradient: bool) -> Result<bool> {
    let results = run_battery(Hooks { corrupt_gradient });
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status}  {:<width$}  {}", r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} properties passed", results.len() - failed, results.len());
    Ok(failed == 0)
}

fn cmd_show(path: &Path) -> Result<()> {
    let file = if path.is_dir() { path.join("record.json") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    let record = RunRecord::from_json(&text).with_context(|| format!("{} is not a run record", file.display()))?;
    print!("{}", record.summary());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config, resume } => cmd_run(config, resume.as_deref()).map(|()| true),
        Command::Ablate { config, axis, seeds } => cmd_ablate(config, *axis, *seeds).map(|()| true),
        Command::Verify { corrupt_gradient } => cmd_verify(*corrupt_gradient),
        Command::Show { path } => cmd_show(path).map(|()| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
