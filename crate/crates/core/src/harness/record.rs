//! The per-run output document and its tabular companion.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{AdapterChoice, RunConfig, StreamKind};
use super::data::DataAudit;
use super::metrics::{compute_aaa, compute_acc, compute_forgetting, MetricError, AAA_FORMULA};

pub const RECORD_FORMAT: &str = "fmlora-run-record/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task_id: usize,
    pub classes: Vec<usize>,
    /// Probe validation loss `H`; absent when rank selection is off.
    pub complexity: Option<f64>,
    pub rank: Option<usize>,
    pub rank_distribution: Option<Vec<f64>>,
    pub selector_weights: Option<Vec<f64>>,
    pub candidate_probe_losses: Option<Vec<f64>>,
    pub final_train_loss: f64,
    /// Largest column/row residual of this task's update over all layers.
    pub max_subspace_residual: Option<f64>,
    /// Every component frozen before this task hashes identically after it.
    pub frozen_history_unchanged: bool,
    pub frozen_components: usize,
    pub frozen_state_sha256: String,
    pub prompt_sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerLedger {
    pub name: String,
    pub d_input: usize,
    pub d_output: usize,
    /// One-time shared-basis cost (zero for non-factorized adapters).
    pub basis_params: usize,
    /// Trainable adapter scalars created for each task.
    pub task_params: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterLedger {
    pub layers: Vec<LayerLedger>,
    pub basis_total: usize,
    pub task_total: usize,
}

impl ParameterLedger {
    pub fn recompute_totals(&mut self) {
        self.basis_total = self.layers.iter().map(|l| l.basis_params).sum();
        self.task_total = self.layers.iter().flat_map(|l| l.task_params.iter()).sum();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub aaa: f64,
    pub forgetting: f64,
    pub aaa_formula: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format: String,
    pub config: RunConfig,
    pub seed: u64,
    pub stream_kind: StreamKind,
    pub adapter_kind: AdapterChoice,
    pub dmp_enabled: bool,
    pub prompt_len: usize,
    /// `accuracy[k][t]`: test accuracy on task `t` after task `k`.
    pub accuracy: Vec<Vec<f64>>,
    pub tasks: Vec<TaskLog>,
    /// Summed over adapted layers; symmetric, diagonal is `‖ΔW_t‖²`.
    pub interference: Vec<Vec<f64>>,
    pub parameters: ParameterLedger,
    pub audit: DataAudit,
    pub metrics: Option<Metrics>,
}

impl RunRecord {
    pub fn new(config: &RunConfig, num_tasks: usize) -> Self {
        Self {
            format: RECORD_FORMAT.into(),
            config: config.clone(),
            seed: config.seed,
            stream_kind: config.stream.kind,
            adapter_kind: config.adapter.kind,
            dmp_enabled: config.dmp.m > 0,
            prompt_len: config.dmp.m,
            accuracy: Vec::new(),
            tasks: Vec::new(),
            interference: Vec::new(),
            parameters: ParameterLedger::default(),
            audit: DataAudit::new(num_tasks),
            metrics: None,
        }
    }

    pub fn finalize(&mut self) -> Result<(), MetricError> {
        self.metrics = Some(Metrics {
            acc: compute_acc(&self.accuracy)?,
            aaa: compute_aaa(&self.accuracy)?,
            forgetting: compute_forgetting(&self.accuracy)?,
            aaa_formula: AAA_FORMULA.into(),
        });
        Ok(())
    }

    pub fn acc(&self) -> Option<f64> {
        self.metrics.as_ref().map(|m| m.acc)
    }

    pub fn aaa(&self) -> Option<f64> {
        self.metrics.as_ref().map(|m| m.aaa)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("record serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// `k,t,accuracy` rows, one per filled matrix entry.
    pub fn accuracy_csv(&self) -> String {
        let mut out = String::from("k,t,accuracy\n");
        for (k, row) in self.accuracy.iter().enumerate() {
            for (t, a) in row.iter().enumerate() {
                writeln!(out, "{k},{t},{a}").unwrap();
            }
        }
        out
    }

    /// Human-readable summary used by `show`.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "seed {}  stream {:?}  adapter {:?}  prompt m={}",
            self.seed, self.stream_kind, self.adapter_kind, self.prompt_len
        )
        .unwrap();
        if let Some(m) = &self.metrics {
            writeln!(out, "Acc {:.4}  AAA {:.4}  forgetting {:.4}", m.acc, m.aaa, m.forgetting).unwrap();
        }
        writeln!(out, "\naccuracy matrix (row k = after task k):").unwrap();
        for (k, row) in self.accuracy.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|a| format!("{a:.3}")).collect();
            writeln!(out, "  {k:>3}: {}", cells.join(" ")).unwrap();
        }
        writeln!(out, "\n task  rank      H  train-loss  residual").unwrap();
        for t in &self.tasks {
            writeln!(
                out,
                " {:>4}  {:>4}  {:>5}  {:>10.4}  {:>8}",
                t.task_id,
                t.rank.map_or("-".into(), |r| r.to_string()),
                t.complexity.map_or("-".into(), |h| format!("{h:.3}")),
                t.final_train_loss,
                t.max_subspace_residual.map_or("-".into(), |r| format!("{r:.1e}")),
            )
            .unwrap();
        }
        writeln!(
            out,
            "\nparameters: bases {} + per-task {}",
            self.parameters.basis_total, self.parameters.task_total
        )
        .unwrap();
        out
    }

    /// Writes `record.json` and `accuracy.csv` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("record.json"), self.to_json().as_bytes())?;
        write_atomic(&dir.join("accuracy.csv"), self.accuracy_csv().as_bytes())
    }
}

/// Writes to a sibling temporary file, syncs it, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result
}
