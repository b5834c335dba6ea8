//! Ablation grids and their comparison tables.

use std::fmt::Write as _;

use super::config::RunConfig;
use super::record::RunRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    RankFixedVsDrs,
    DmpMSweep,
    TaskLengthSweep,
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rank_fixed_vs_drs" => Ok(Axis::RankFixedVsDrs),
            "dmp_m_sweep" => Ok(Axis::DmpMSweep),
            "task_length_sweep" => Ok(Axis::TaskLengthSweep),
            other => Err(format!(
                "unknown ablation axis `{other}` (expected rank_fixed_vs_drs, dmp_m_sweep or task_length_sweep)"
            )),
        }
    }
}

pub const PROMPT_LENGTHS: [usize; 4] = [0, 5, 10, 20];
pub const TASK_COUNTS: [usize; 3] = [5, 10, 20];

/// One table row: a label and the per-seed configs to run for it.
#[derive(Clone, Debug)]
pub struct Cell {
    pub label: String,
    pub configs: Vec<RunConfig>,
}

pub fn cells(axis: Axis, base: &RunConfig, seeds: &[u64]) -> Vec<Cell> {
    let with_seeds = |label: String, f: &dyn Fn(&mut RunConfig)| {
        let configs = seeds
            .iter()
            .map(|&seed| {
                let mut c = base.clone();
                c.seed = seed;
                f(&mut c);
                c
            })
            .collect();
        Cell { label, configs }
    };
    match axis {
        Axis::RankFixedVsDrs => {
            let mut out: Vec<Cell> = base
                .drs
                .candidates
                .iter()
                .map(|&r| {
                    with_seeds(format!("fixed r={r}"), &move |c: &mut RunConfig| {
                        c.drs.enabled = false;
                        c.adapter.fixed_rank = r;
                    })
                })
                .collect();
            out.push(with_seeds("drs".into(), &|c: &mut RunConfig| c.drs.enabled = true));
            out
        }
        Axis::DmpMSweep => PROMPT_LENGTHS
            .iter()
            .map(|&m| with_seeds(format!("m={m}"), &move |c: &mut RunConfig| c.dmp.m = m))
            .collect(),
        Axis::TaskLengthSweep => TASK_COUNTS
            .iter()
            .map(|&n| with_seeds(format!("N={n}"), &move |c: &mut RunConfig| c.stream.num_tasks = n))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub label: String,
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub aaa_mean: f64,
    pub aaa_std: f64,
    pub task_params_mean: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed mean and sample standard deviation of Acc and AAA.
pub fn summarize(label: &str, records: &[RunRecord]) -> Row {
    let acc: Vec<f64> = records.iter().filter_map(RunRecord::acc).collect();
    let aaa: Vec<f64> = records.iter().filter_map(RunRecord::aaa).collect();
    let params: Vec<f64> = records.iter().map(|r| r.parameters.task_total as f64).collect();
    let (acc_mean, acc_std) = mean_std(&acc);
    let (aaa_mean, aaa_std) = mean_std(&aaa);
    Row {
        label: label.into(),
        runs: records.len(),
        acc_mean,
        acc_std,
        aaa_mean,
        aaa_std,
        task_params_mean: mean_std(&params).0,
    }
}

pub fn render_text(rows: &[Row]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    writeln!(
        out,
        "{:<width$}  {:>4}  {:>16}  {:>16}  {:>12}",
        "config", "runs", "Acc (%)", "AAA (%)", "task params"
    )
    .unwrap();
    for r in rows {
        writeln!(
            out,
            "{:<width$}  {:>4}  {:>8.2} ± {:<5.2}  {:>8.2} ± {:<5.2}  {:>12.0}",
            r.label,
            r.runs,
            100.0 * r.acc_mean,
            100.0 * r.acc_std,
            100.0 * r.aaa_mean,
            100.0 * r.aaa_std,
            r.task_params_mean
        )
        .unwrap();
    }
    out
}

pub fn render_csv(rows: &[Row]) -> String {
    let mut out = String::from("config,runs,acc_mean,acc_std,aaa_mean,aaa_std,task_params_mean\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.label, r.runs, r.acc_mean, r.acc_std, r.aaa_mean, r.aaa_std, r.task_params_mean
        )
        .unwrap();
    }
    out
}
