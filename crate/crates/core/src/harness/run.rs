//! The sequential per-task pipeline.

use sha2::{Digest, Sha256};

use super::config::{AdapterChoice, RunConfig, StreamKind};
use super::data::{generate_cil_stream, generate_stream, AuditedStream, DataError, Split, TaskStream};
use super::metrics::MetricError;
use super::record::{LayerLedger, ParameterLedger, RunRecord, TaskLog};
use crate::dmp::MetaPrompt;
use crate::drs::{
    estimate_complexity, probe_loss, rank_distribution, select_rank, update_selector_weights, DrsError,
    ProbeConfig, RankSelector,
};
use crate::flora::{interference_reduced, subspace_residual, Adaptation, FloraError};
use crate::model::{
    evaluate, loss_and_gradients, train_step, AdamW, AdapterKind, Dataset, ModelError, ParamKey, Schedule,
    TinyTransformer,
};
use crate::numerics::{frobenius_inner, Rng};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] super::config::ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Drs(#[from] DrsError),
    #[error(transparent)]
    Flora(#[from] FloraError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("stream has {stream} tasks but the run expects {expected}")]
    StreamMismatch { stream: usize, expected: usize },
    #[error("all {0} tasks are already complete")]
    AlreadyComplete(usize),
}

// Fork identifiers; per-task streams start at `TASK_STREAM_BASE + k`.
const STREAM_DATA: u64 = 1;
const STREAM_MODEL: u64 = 2;
const STREAM_PROMPT: u64 = 3;
const STREAM_PRETRAIN: u64 = 4;
const TASK_STREAM_BASE: u64 = 1000;

/// Everything needed to continue a run from a task boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub config: RunConfig,
    pub model: TinyTransformer<f64>,
    pub prompt: MetaPrompt<f64>,
    pub selector: RankSelector,
    pub record: RunRecord,
    pub tasks_completed: usize,
}

/// The task stream a config describes.
pub fn stream_for(config: &RunConfig) -> Result<TaskStream, RunError> {
    let seed = Rng::new(config.seed).fork(STREAM_DATA).next_u64();
    Ok(generate_stream(&config.stream, config.model.embed_dim, seed)?)
}

/// Runs every task of `stream` and returns the finished record.
pub fn run_sequence(stream: &TaskStream, config: &RunConfig) -> Result<RunRecord, RunError> {
    let mut state = RunState::new(config, stream)?;
    while !state.is_complete() {
        state.run_next_task(stream)?;
    }
    state.into_record()
}

impl RunState {
    pub fn new(config: &RunConfig, stream: &TaskStream) -> Result<Self, RunError> {
        config.validate()?;
        if stream.tasks.len() != config.stream.num_tasks {
            return Err(RunError::StreamMismatch {
                stream: stream.tasks.len(),
                expected: config.stream.num_tasks,
            });
        }
        let master = Rng::new(config.seed);
        let kind = match config.adapter.kind {
            AdapterChoice::Flora => AdapterKind::Flora {
                r_max: config.adapter.r_max,
                orthonormal: config.adapter.orthonormal,
            },
            AdapterChoice::PlainLora => AdapterKind::PlainLora,
            AdapterChoice::Overwrite => AdapterKind::Dense,
        };
        let layout = stream.head_layout();
        let mut model_rng = master.fork(STREAM_MODEL);
        let mut model = TinyTransformer::new(config.model_config(), &layout, kind, &mut model_rng)?;
        if config.backbone.pretrain {
            pretrain_backbone(&mut model, config, &mut master.fork(STREAM_PRETRAIN))?;
            model.reset_head(&layout, &mut model_rng);
        }
        let prompt = MetaPrompt::new(config.dmp.m, config.model.embed_dim, &mut master.fork(STREAM_PROMPT));
        let selector = RankSelector::new(config.drs.candidates.clone(), config.drs.tau, config.adapter.r_max)?;
        let mut record = RunRecord::new(config, stream.tasks.len());
        record.parameters = ledger(&model);
        Ok(Self {
            config: config.clone(),
            model,
            prompt,
            selector,
            record,
            tasks_completed: 0,
        })
    }

    pub fn is_complete(&self) -> bool {
        self.tasks_completed >= self.config.stream.num_tasks
    }

    /// Probe, select a rank, train, freeze, evaluate and log one task.
    pub fn run_next_task(&mut self, stream: &TaskStream) -> Result<(), RunError> {
        let k = self.tasks_completed;
        if self.is_complete() {
            return Err(RunError::AlreadyComplete(k));
        }
        let cfg = self.config.clone();
        let mut rng = Rng::new(cfg.seed).fork(TASK_STREAM_BASE + k as u64);
        let mut audit = std::mem::take(&mut self.record.audit);
        let result = self.task_body(stream, k, &cfg, &mut rng, &mut audit);
        self.record.audit = audit;
        result?;
        self.tasks_completed += 1;
        Ok(())
    }

    fn task_body(
        &mut self,
        stream: &TaskStream,
        k: usize,
        cfg: &RunConfig,
        rng: &mut Rng,
        audit: &mut super::data::DataAudit,
    ) -> Result<(), RunError> {
        let view = AuditedStream::new(stream, audit);
        let cil = stream.kind == StreamKind::ClassIncremental;
        self.model.set_visible_blocks(if cil { k + 1 } else { 1 });

        let train = view.split(k, k, Split::Train);
        let mut log = TaskLog {
            task_id: k,
            classes: stream.tasks[k].classes.clone(),
            complexity: None,
            rank: None,
            rank_distribution: None,
            selector_weights: None,
            candidate_probe_losses: None,
            final_train_loss: 0.0,
            max_subspace_residual: None,
            frozen_history_unchanged: true,
            frozen_components: 0,
            frozen_state_sha256: String::new(),
            prompt_sha256: String::new(),
        };

        let rank = match cfg.adapter.kind {
            AdapterChoice::Flora if cfg.uses_drs() => {
                let val = view.split(k, k, Split::Val);
                let probe = ProbeConfig {
                    steps: cfg.drs.probe_steps,
                    batch_size: cfg.train.batch_size,
                    optimizer: cfg.optimizer(),
                };
                let h = estimate_complexity(&self.model, &self.prompt, train, val, k, &self.selector, &probe, &mut rng.fork(1))?;
                if cfg.drs.weight_steps > 0 {
                    let mut losses = vec![h.h_value];
                    for (i, &r) in self.selector.candidates()[1..].iter().enumerate() {
                        let mut probe_rng = rng.fork(2 + i as u64);
                        losses.push(probe_loss(&self.model, &self.prompt, train, val, k, r, &probe, &mut probe_rng)?);
                    }
                    for _ in 0..cfg.drs.weight_steps {
                        self.selector = update_selector_weights(&self.selector, &h, &losses, cfg.drs.weight_lr)?;
                    }
                    log.candidate_probe_losses = Some(losses);
                }
                log.rank_distribution = Some(rank_distribution(&self.selector, &h)?);
                log.selector_weights = Some(self.selector.weights().to_vec());
                log.complexity = Some(h.h_value);
                select_rank(&self.selector, &h, cfg.drs.mode, &mut rng.fork(100))?
            }
            AdapterChoice::Flora | AdapterChoice::PlainLora => cfg.adapter.fixed_rank,
            AdapterChoice::Overwrite => cfg.adapter.r_max,
        };
        if cfg.adapter.kind != AdapterChoice::Overwrite {
            log.rank = Some(rank);
        }

        let before = frozen_digests(&self.model);
        self.model.begin_task(k, rank, &mut rng.fork(200))?;
        log.final_train_loss = self.train_task(train, cfg, &mut rng.fork(300))?;
        self.model.end_task()?;
        if cil {
            self.model.freeze_head_block(k);
        }

        let after = frozen_digests(&self.model);
        log.frozen_history_unchanged = before.iter().all(|b| after.contains(b));
        log.frozen_components = after.len();
        log.frozen_state_sha256 = combined_digest(&after);
        log.prompt_sha256 = hex(&Sha256::digest(self.prompt.tokens().to_bytes()));

        let row = (0..=k)
            .map(|t| {
                let test = view.test(t);
                evaluate(&self.model, &self.prompt, &test.input_refs(), &test.labels).map(|(acc, _)| acc)
            })
            .collect::<Result<Vec<f64>, _>>()?;
        self.record.accuracy.push(row);

        log.max_subspace_residual = self.max_residual(k)?;
        self.extend_interference(k)?;
        self.record.parameters = ledger(&self.model);
        self.record.tasks.push(log);
        Ok(())
    }

    fn train_task(&mut self, train: &Dataset<f64>, cfg: &RunConfig, rng: &mut Rng) -> Result<f64, RunError> {
        let n = train.len();
        let batch = cfg.train.batch_size.min(n).max(1);
        let per_epoch = n.div_ceil(batch);
        let mut optimizer = AdamW::new(
            cfg.optimizer(),
            Schedule::Cosine {
                total_steps: per_epoch * cfg.train.epochs,
            },
        );
        let mut order: Vec<usize> = (0..n).collect();
        let mut epoch_loss = f64::NAN;
        for _ in 0..cfg.train.epochs {
            rng.shuffle(&mut order);
            let mut total = 0.0;
            for chunk in order.chunks(batch) {
                let (x, y) = train.batch(chunk);
                total += train_step(&mut self.model, &mut self.prompt, &x, &y, &mut optimizer)? * chunk.len() as f64;
            }
            epoch_loss = total / n as f64;
        }
        Ok(epoch_loss)
    }

    /// Largest containment residual of task `k`'s update over all layers.
    fn max_residual(&self, k: usize) -> Result<Option<f64>, RunError> {
        let mut worst: Option<f64> = None;
        for layer in self.model.adapted_layers() {
            if let Adaptation::Factorized { bases, adapters } = layer.adaptation() {
                if !bases.orthonormal_mode() {
                    return Ok(None);
                }
                if let Some(a) = adapters.iter().find(|a| a.task_id() == k) {
                    let (col, row) = subspace_residual(bases, a)?;
                    worst = Some(worst.unwrap_or(0.0).max(col).max(row));
                }
            }
        }
        Ok(worst)
    }

    /// Adds row and column `k` of the interference matrix, summed over layers.
    fn extend_interference(&mut self, k: usize) -> Result<(), RunError> {
        let mut row = vec![0.0; k + 1];
        for layer in self.model.adapted_layers() {
            match layer.adaptation() {
                Adaptation::Factorized { bases, adapters } => {
                    let Some(new) = adapters.iter().find(|a| a.task_id() == k) else { continue };
                    for old in adapters.iter().filter(|a| a.task_id() <= k) {
                        let v = if bases.orthonormal_mode() {
                            interference_reduced(old, new)?
                        } else {
                            crate::flora::interference_full(bases, old, new)?
                        };
                        row[old.task_id()] += v;
                    }
                }
                Adaptation::PlainLora { adapters } => {
                    let Some(new) = adapters.iter().find(|a| a.task_id == k) else { continue };
                    let delta = new.delta();
                    for old in adapters.iter().filter(|a| a.task_id <= k) {
                        row[old.task_id] += frobenius_inner(&old.delta(), &delta).expect("same layer shape");
                    }
                }
                Adaptation::Dense { .. } => {}
            }
        }
        let m = &mut self.record.interference;
        for (t, existing) in m.iter_mut().enumerate() {
            existing.push(row[t]);
        }
        m.push(row);
        Ok(())
    }

    pub fn into_record(mut self) -> Result<RunRecord, RunError> {
        self.record.finalize()?;
        Ok(self.record)
    }
}

/// Trains the base weights and a temporary head on held-out classes, then
/// freezes the backbone again.
fn pretrain_backbone(model: &mut TinyTransformer<f64>, config: &RunConfig, rng: &mut Rng) -> Result<(), RunError> {
    let classes = config.backbone.pretrain_classes.max(2);
    let held_out = generate_cil_stream(
        1,
        classes,
        config.model.embed_dim,
        config.stream.seq_len,
        config.stream.samples_per_class,
        &[config.stream.separation],
        rng,
    )?;
    let data = &held_out.tasks[0].train;
    model.reset_head(&[classes], rng);
    model.set_visible_blocks(1);
    model.set_backbone_trainable(true);
    let mut prompt = MetaPrompt::disabled(config.model.embed_dim);
    let mut optimizer = AdamW::new(
        config.optimizer(),
        Schedule::Cosine {
            total_steps: config.backbone.pretrain_steps,
        },
    );
    let batch = config.train.batch_size.min(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    for _ in 0..config.backbone.pretrain_steps {
        if cursor + batch > order.len() {
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let (x, y) = data.batch(&order[cursor..cursor + batch]);
        cursor += batch;
        let (_, mut grads) = loss_and_gradients(model, &prompt, &x, &y)?;
        grads.retain(|k| matches!(k, ParamKey::Base { .. } | ParamKey::Head { .. }));
        optimizer.step(model, &mut prompt, &grads)?;
    }
    model.set_backbone_trainable(false);
    Ok(())
}

/// Digest of every frozen component, keyed by a stable identifier.
fn frozen_digests(model: &TinyTransformer<f64>) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for layer in model.adapted_layers() {
        out.push((format!("{}/base", layer.name()), hex(&Sha256::digest(layer.base_weight().to_bytes()))));
        match layer.adaptation() {
            Adaptation::Factorized { bases, adapters } => {
                if bases.is_frozen() {
                    let mut bytes = bases.a_shared().to_bytes();
                    bytes.extend(bases.b_shared().to_bytes());
                    out.push((format!("{}/bases", layer.name()), hex(&Sha256::digest(bytes))));
                }
                for a in adapters.iter().filter(|a| a.is_frozen()) {
                    out.push((
                        format!("{}/task{}", layer.name(), a.task_id()),
                        hex(&Sha256::digest(a.to_bytes())),
                    ));
                }
            }
            Adaptation::PlainLora { adapters } => {
                for a in adapters.iter().filter(|a| a.frozen) {
                    let mut bytes = a.a.to_bytes();
                    bytes.extend(a.b.to_bytes());
                    out.push((format!("{}/task{}", layer.name(), a.task_id), hex(&Sha256::digest(bytes))));
                }
            }
            Adaptation::Dense { .. } => {}
        }
    }
    for (i, block) in model.head_blocks().iter().enumerate().filter(|(_, b)| b.frozen) {
        out.push((format!("head{i}"), hex(&Sha256::digest(block.weights.to_bytes()))));
    }
    out
}

fn combined_digest(parts: &[(String, String)]) -> String {
    let mut h = Sha256::new();
    for (id, digest) in parts {
        h.update(id.as_bytes());
        h.update(digest.as_bytes());
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameter ledger read off the stored matrices.
pub fn ledger(model: &TinyTransformer<f64>) -> ParameterLedger {
    let mut ledger = ParameterLedger::default();
    for layer in model.adapted_layers() {
        let size = |m: &crate::numerics::Matrix<f64>| m.rows() * m.cols();
        let (basis_params, task_params) = match layer.adaptation() {
            Adaptation::Factorized { bases, adapters } => (
                size(bases.a_shared()) + size(bases.b_shared()),
                adapters.iter().map(|a| size(a.m_coeff()) + size(a.n_coeff())).collect(),
            ),
            Adaptation::PlainLora { adapters } => (0, adapters.iter().map(|a| size(&a.a) + size(&a.b)).collect()),
            Adaptation::Dense { delta } => (0, vec![size(delta)]),
        };
        ledger.layers.push(LayerLedger {
            name: layer.name().to_string(),
            d_input: layer.d_input(),
            d_output: layer.d_output(),
            basis_params,
            task_params,
        });
    }
    ledger.recompute_totals();
    ledger
}
