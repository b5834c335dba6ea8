//! Synthetic task streams in token-embedding space.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use super::config::{StreamConfig, StreamKind};
use crate::model::Dataset;
use crate::numerics::{qr_orthonormalize, Matrix, Rng};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("each task needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("separation must be non-negative and finite, got {0}")]
    BadSeparation(f64),
    #[error("domain shift must be non-negative and finite, got {0}")]
    BadShift(f64),
    #[error("need at least 10 samples per class for a 70/10/20 split, got {0}")]
    TooFewSamples(usize),
}

/// Generator parameters of one task.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskGenerator {
    /// Identity-covariance Gaussian clusters, one mean per class.
    Clusters { means: Vec<Vec<f64>> },
    /// Shared prototypes mapped by `x ↦ R x + shift`.
    Domain {
        prototypes: Vec<Vec<f64>>,
        rotation: Matrix<f64>,
        shift: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub task_id: usize,
    /// Global labels of the classes in this task.
    pub classes: Vec<usize>,
    pub generator: TaskGenerator,
    pub train: Dataset<f64>,
    pub val: Dataset<f64>,
    pub test: Dataset<f64>,
}

#[derive(Clone, Debug)]
pub struct TaskStream {
    pub kind: StreamKind,
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
}

impl TaskStream {
    pub fn total_classes(&self) -> usize {
        self.tasks.iter().flat_map(|t| t.classes.iter()).max().map_or(0, |c| c + 1)
    }

    /// Classifier block widths: one per task for class-incremental streams,
    /// a single shared block otherwise.
    pub fn head_layout(&self) -> Vec<usize> {
        match self.kind {
            StreamKind::ClassIncremental => self.tasks.iter().map(|t| t.classes.len()).collect(),
            StreamKind::DomainIncremental => vec![self.tasks.first().map_or(0, |t| t.classes.len())],
        }
    }
}

/// Builds the stream described by `config` from `seed`.
pub fn generate_stream(config: &StreamConfig, embed_dim: usize, seed: u64) -> Result<TaskStream, DataError> {
    let mut rng = Rng::new(seed);
    match config.kind {
        StreamKind::ClassIncremental => generate_cil_stream(
            config.num_tasks,
            config.classes_per_task,
            embed_dim,
            config.seq_len,
            config.samples_per_class,
            &separations(config),
            &mut rng,
        ),
        StreamKind::DomainIncremental => generate_dil_stream(
            config.num_tasks,
            config.num_classes,
            embed_dim,
            config.seq_len,
            config.samples_per_class,
            config.separation,
            config.domain_shift,
            &mut rng,
        ),
    }
    .map(|mut s| {
        s.seed = seed;
        s
    })
}

fn separations(config: &StreamConfig) -> Vec<f64> {
    if config.separations.is_empty() {
        vec![config.separation]
    } else {
        config.separations.clone()
    }
}

fn unit_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Class-incremental stream. Task `k` uses `separations[k % len]` as the
/// radius of its class means; tasks own disjoint, consecutive labels.
pub fn generate_cil_stream(
    num_tasks: usize,
    classes_per_task: usize,
    embed_dim: usize,
    seq_len: usize,
    samples_per_class: usize,
    separations: &[f64],
    rng: &mut Rng,
) -> Result<TaskStream, DataError> {
    if classes_per_task < 2 {
        return Err(DataError::TooFewClasses(classes_per_task));
    }
    if samples_per_class < 10 {
        return Err(DataError::TooFewSamples(samples_per_class));
    }
    if let Some(&s) = separations.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(DataError::BadSeparation(s));
    }
    let mut tasks = Vec::with_capacity(num_tasks);
    for k in 0..num_tasks {
        let radius = separations[k % separations.len()];
        let means: Vec<Vec<f64>> = (0..classes_per_task)
            .map(|_| unit_vector(embed_dim, rng).into_iter().map(|x| radius * x).collect())
            .collect();
        let classes: Vec<usize> = (0..classes_per_task).map(|j| k * classes_per_task + j).collect();
        let generator = TaskGenerator::Clusters { means };
        let (train, val, test) = sample_splits(&generator, &classes, seq_len, samples_per_class, rng);
        tasks.push(TaskSpec {
            task_id: k,
            classes,
            generator,
            train,
            val,
            test,
        });
    }
    Ok(TaskStream {
        kind: StreamKind::ClassIncremental,
        seed: 0,
        tasks,
    })
}

/// Domain-incremental stream: fixed prototypes, and task `k` rotates by angle
/// `domain_shift · k` in a random 2-plane and translates by `domain_shift · k`
/// along a random direction.
#[allow(clippy::too_many_arguments)]
pub fn generate_dil_stream(
    num_tasks: usize,
    num_classes: usize,
    embed_dim: usize,
    seq_len: usize,
    samples_per_class: usize,
    separation: f64,
    domain_shift: f64,
    rng: &mut Rng,
) -> Result<TaskStream, DataError> {
    if num_classes < 2 {
        return Err(DataError::TooFewClasses(num_classes));
    }
    if samples_per_class < 10 {
        return Err(DataError::TooFewSamples(samples_per_class));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(DataError::BadSeparation(separation));
    }
    if !(domain_shift.is_finite() && domain_shift >= 0.0) {
        return Err(DataError::BadShift(domain_shift));
    }
    let prototypes: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| unit_vector(embed_dim, rng).into_iter().map(|x| separation * x).collect())
        .collect();
    let classes: Vec<usize> = (0..num_classes).collect();
    let mut tasks = Vec::with_capacity(num_tasks);
    for k in 0..num_tasks {
        let angle = domain_shift * k as f64;
        let rotation = plane_rotation(embed_dim, angle, rng);
        let direction = unit_vector(embed_dim, rng);
        let shift = direction.into_iter().map(|x| angle * x).collect();
        let generator = TaskGenerator::Domain {
            prototypes: prototypes.clone(),
            rotation,
            shift,
        };
        let (train, val, test) = sample_splits(&generator, &classes, seq_len, samples_per_class, rng);
        tasks.push(TaskSpec {
            task_id: k,
            classes: classes.clone(),
            generator,
            train,
            val,
            test,
        });
    }
    Ok(TaskStream {
        kind: StreamKind::DomainIncremental,
        seed: 0,
        tasks,
    })
}

/// `I + (cos θ − 1)(uuᵀ + vvᵀ) + sin θ (vuᵀ − uvᵀ)` for a random orthonormal
/// pair `(u, v)`: rotation by `θ` in span(u, v).
pub fn plane_rotation(dim: usize, angle: f64, rng: &mut Rng) -> Matrix<f64> {
    if dim < 2 {
        return Matrix::identity(dim);
    }
    let basis = loop {
        let raw = Matrix::from_fn(dim, 2, |_, _| rng.normal());
        if let Ok(q) = qr_orthonormalize(&raw) {
            break q;
        }
    };
    let (c, s) = (angle.cos(), angle.sin());
    Matrix::from_fn(dim, dim, |i, j| {
        let (ui, vi, uj, vj) = (basis[(i, 0)], basis[(i, 1)], basis[(j, 0)], basis[(j, 1)]);
        let id = if i == j { 1.0 } else { 0.0 };
        id + (c - 1.0) * (ui * uj + vi * vj) + s * (vi * uj - ui * vj)
    })
}

impl TaskGenerator {
    /// Class centre after the task's transform.
    pub fn class_mean(&self, local_class: usize) -> Vec<f64> {
        match self {
            TaskGenerator::Clusters { means } => means[local_class].clone(),
            TaskGenerator::Domain {
                prototypes,
                rotation,
                shift,
            } => {
                let p = &prototypes[local_class];
                (0..p.len())
                    .map(|i| (0..p.len()).map(|j| rotation[(i, j)] * p[j]).sum::<f64>() + shift[i])
                    .collect()
            }
        }
    }

    fn sample(&self, local_class: usize, seq_len: usize, rng: &mut Rng) -> Matrix<f64> {
        match self {
            TaskGenerator::Clusters { means } => {
                let mean = &means[local_class];
                Matrix::from_fn(seq_len, mean.len(), |_, j| mean[j] + rng.normal())
            }
            TaskGenerator::Domain {
                prototypes,
                rotation,
                shift,
            } => {
                let p = &prototypes[local_class];
                let raw = Matrix::from_fn(seq_len, p.len(), |_, j| p[j] + rng.normal());
                let mut out = raw.dot_t(rotation);
                for i in 0..seq_len {
                    for (x, s) in out.row_mut(i).iter_mut().zip(shift) {
                        *x += s;
                    }
                }
                out
            }
        }
    }
}

/// Per class: 70% train, 10% validation, 20% test, in shuffled order.
fn sample_splits(
    generator: &TaskGenerator,
    classes: &[usize],
    seq_len: usize,
    samples_per_class: usize,
    rng: &mut Rng,
) -> (Dataset<f64>, Dataset<f64>, Dataset<f64>) {
    let n_train = samples_per_class * 7 / 10;
    let n_val = samples_per_class / 10;
    let mut splits = (Dataset::default(), Dataset::default(), Dataset::default());
    for (local, &label) in classes.iter().enumerate() {
        for i in 0..samples_per_class {
            let x = generator.sample(local, seq_len, rng);
            let target = if i < n_train {
                &mut splits.0
            } else if i < n_train + n_val {
                &mut splits.1
            } else {
                &mut splits.2
            };
            target.inputs.push(x);
            target.labels.push(label);
        }
    }
    for split in [&mut splits.0, &mut splits.1, &mut splits.2] {
        let mut order: Vec<usize> = (0..split.len()).collect();
        rng.shuffle(&mut order);
        split.inputs = order.iter().map(|&i| split.inputs[i].clone()).collect();
        split.labels = order.iter().map(|&i| split.labels[i]).collect();
    }
    splits
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Counts training-side reads: `reads[phase][task]` is the number of train
/// or validation examples of `task` handed out while the harness was working
/// on task `phase`. Test-split evaluation is not a training read and is not
/// counted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataAudit {
    pub reads: Vec<Vec<u64>>,
}

impl DataAudit {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            reads: vec![vec![0; num_tasks]; num_tasks],
        }
    }

    /// Total reads of tasks `s < k` during phase `k`.
    pub fn past_task_reads(&self) -> u64 {
        self.reads
            .iter()
            .enumerate()
            .map(|(k, row)| row[..k.min(row.len())].iter().sum::<u64>())
            .sum()
    }
}

/// Hands out a task's train or validation split and records the access.
pub struct AuditedStream<'a> {
    stream: &'a TaskStream,
    audit: RefCell<&'a mut DataAudit>,
}

impl<'a> AuditedStream<'a> {
    pub fn new(stream: &'a TaskStream, audit: &'a mut DataAudit) -> Self {
        Self {
            stream,
            audit: RefCell::new(audit),
        }
    }

    pub fn split(&self, phase: usize, task: usize, split: Split) -> &'a Dataset<f64> {
        let spec = &self.stream.tasks[task];
        let data = match split {
            Split::Train => &spec.train,
            Split::Val => &spec.val,
        };
        self.audit.borrow_mut().reads[phase][task] += data.len() as u64;
        data
    }

    pub fn test(&self, task: usize) -> &'a Dataset<f64> {
        &self.stream.tasks[task].test
    }
}
