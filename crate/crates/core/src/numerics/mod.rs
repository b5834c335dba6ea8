//! Dense matrix kernels, Householder QR, softmax and the seeded generator.

mod matrix;
mod qr;
mod rng;

pub use matrix::{frobenius_inner, Matrix};
pub use qr::{qr_decompose, qr_orthonormalize, QrFactors};
pub use rng::Rng;

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch, left is {}×{}, right is {}×{}", left.0, left.1, right.0, right.1)]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix data has length {len}, expected {rows}×{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("{op}: result contains non-finite entries")]
    NonFinite { op: &'static str },
    #[error("QR needs rows >= cols, got {rows}×{cols}")]
    TooFewRows { rows: usize, cols: usize },
    #[error("matrix is rank deficient at column {column}")]
    RankDeficient { column: usize },
    #[error("softmax temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("softmax input contains non-finite values")]
    NonFiniteInput,
    #[error("truncated matrix data")]
    Truncated,
    #[error("matrix decode failed: {0}")]
    Decode(String),
}

impl NumericsError {
    pub(crate) fn from_io(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Self::Truncated
        } else {
            Self::Decode(e.to_string())
        }
    }
}

/// Temperature softmax `exp(v_i / τ) / Σ_j exp(v_j / τ)`, max-shifted.
pub fn softmax<S: Scalar>(v: &[S], temperature: S) -> Result<Vec<S>, NumericsError> {
    if !(temperature > S::zero()) || !temperature.is_finite() {
        return Err(NumericsError::BadTemperature(temperature.to_f64()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::NonFiniteInput);
    }
    let scaled: Vec<S> = v.iter().map(|&x| x / temperature).collect();
    Ok(softmax_unit(&scaled))
}

/// Unit-temperature softmax; callers guarantee finite input.
pub(crate) fn softmax_unit<S: Scalar>(v: &[S]) -> Vec<S> {
    let max = v.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
    let mut out: Vec<S> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: S = out.iter().copied().sum();
    for x in &mut out {
        *x /= total;
    }
    out
}

/// Standard Gumbel draw `−ln(−ln u)` with `u` uniform on the open interval.
pub fn gumbel_sample(rng: &mut Rng) -> f64 {
    gumbel_from_uniform(rng.uniform_open())
}

#[inline]
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}
