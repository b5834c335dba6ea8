//! Continual fine-tuning of a small transformer with factorized low-rank
//! adapters, dynamic rank selection and a shared meta-prompt.

pub mod dmp;
pub mod drs;
pub mod flora;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod verify;

pub use scalar::Scalar;

/// Double-precision aliases used by the harness and the CLI.
pub type Matrix = numerics::Matrix<f64>;
pub type SharedBases = flora::SharedBases<f64>;
pub type TaskAdapter = flora::TaskAdapter<f64>;
pub type AdaptedLayer = flora::AdaptedLayer<f64>;
pub type MetaPrompt = dmp::MetaPrompt<f64>;
pub type TinyTransformer = model::TinyTransformer<f64>;
pub type Dataset = model::Dataset<f64>;
