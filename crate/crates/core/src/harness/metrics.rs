//! Accuracy-matrix metrics. `a[k][t]` is the test accuracy on task `t` after
//! finishing task `k`; row `k` holds `k + 1` entries.

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("accuracy matrix is empty")]
    Empty,
    #[error("row {row} has {got} entries, expected {expected}")]
    Incomplete { row: usize, got: usize, expected: usize },
    #[error("accuracy {value} at ({row}, {col}) is outside [0, 1]")]
    OutOfRange { row: usize, col: usize, value: f64 },
}

fn check(a: &[Vec<f64>]) -> Result<(), MetricError> {
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    for (k, row) in a.iter().enumerate() {
        if row.len() != k + 1 {
            return Err(MetricError::Incomplete {
                row: k,
                got: row.len(),
                expected: k + 1,
            });
        }
        if let Some((t, &value)) = row.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(MetricError::OutOfRange { row: k, col: t, value });
        }
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `Acc = (1/T) Σ_t a[T][t]`.
pub fn compute_acc(a: &[Vec<f64>]) -> Result<f64, MetricError> {
    check(a)?;
    Ok(mean(a.last().expect("non-empty")))
}

/// `AAA = (1/T) Σ_k (1/k) Σ_{t≤k} a[k][t]`, evaluated at task boundaries.
pub fn compute_aaa(a: &[Vec<f64>]) -> Result<f64, MetricError> {
    check(a)?;
    Ok(a.iter().map(|row| mean(row)).sum::<f64>() / a.len() as f64)
}

/// Mean over `t < T` of `max_{k<T} a[k][t] − a[T][t]`; zero for one task.
pub fn compute_forgetting(a: &[Vec<f64>]) -> Result<f64, MetricError> {
    check(a)?;
    let last = a.len() - 1;
    if last == 0 {
        return Ok(0.0);
    }
    let drops: Vec<f64> = (0..last)
        .map(|t| {
            let best = (t..last).map(|k| a[k][t]).fold(f64::NEG_INFINITY, f64::max);
            best - a[last][t]
        })
        .collect();
    Ok(mean(&drops))
}

pub const AAA_FORMULA: &str = "mean over task boundaries k of mean_{t<=k} a[k][t]";
