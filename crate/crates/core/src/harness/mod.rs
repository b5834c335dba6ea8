//! Continual-learning protocol: task streams, the per-task pipeline,
//! metrics, run records and checkpoints.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod record;
pub mod run;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use config::{AdapterChoice, ConfigError, Profile, RunConfig, StreamKind};
pub use data::{generate_cil_stream, generate_dil_stream, DataAudit, TaskStream};
pub use metrics::{compute_aaa, compute_acc, compute_forgetting};
pub use record::RunRecord;
pub use run::{run_sequence, stream_for, RunError, RunState};
