use crate::numerics::{Matrix, NumericsError};
use crate::scalar::Scalar;

/// Thin QR factors: `q` is `rows × cols` with orthonormal columns, `r` is
/// `cols × cols` upper triangular with a strictly positive diagonal.
#[derive(Clone, Debug)]
pub struct QrFactors<S> {
    pub q: Matrix<S>,
    pub r: Matrix<S>,
}

/// Relative threshold on `|R_kk| / ‖column k‖` below which a column counts as
/// linearly dependent on the ones before it.
const RANK_TOLERANCE: f64 = 1e-10;

/// Householder thin QR with positive-diagonal sign convention.
pub fn qr_decompose<S: Scalar>(m: &Matrix<S>) -> Result<QrFactors<S>, NumericsError> {
    let (rows, cols) = m.shape();
    if rows < cols {
        return Err(NumericsError::TooFewRows { rows, cols });
    }
    if !m.is_finite() {
        return Err(NumericsError::NonFiniteInput);
    }
    let col_norms: Vec<S> = (0..cols)
        .map(|j| m.column(j).iter().map(|&x| x * x).sum::<S>().sqrt())
        .collect();

    let mut work = m.clone();
    let mut reflectors: Vec<Vec<S>> = Vec::with_capacity(cols);
    let two = S::lit(2.0);

    for k in 0..cols {
        let x: Vec<S> = (k..rows).map(|i| work[(i, k)]).collect();
        let norm_x = x.iter().map(|&v| v * v).sum::<S>().sqrt();
        if norm_x <= S::lit(RANK_TOLERANCE) * col_norms[k] || norm_x == S::zero() {
            return Err(NumericsError::RankDeficient { column: k });
        }
        let alpha = if x[0] >= S::zero() { -norm_x } else { norm_x };
        let mut v = x;
        v[0] -= alpha;
        let norm_v = v.iter().map(|&t| t * t).sum::<S>().sqrt();
        for t in &mut v {
            *t /= norm_v;
        }
        // work[k.., k..] -= 2 v (vᵀ work[k.., k..])
        for j in k..cols {
            let dot: S = v
                .iter()
                .enumerate()
                .map(|(i, &vi)| vi * work[(k + i, j)])
                .sum();
            for (i, &vi) in v.iter().enumerate() {
                work[(k + i, j)] -= two * vi * dot;
            }
        }
        reflectors.push(v);
    }

    let mut r = Matrix::from_fn(cols, cols, |i, j| if i <= j { work[(i, j)] } else { S::zero() });

    // Q = H_0 H_1 … H_{cols-1} applied to the leading identity columns.
    let mut q = Matrix::from_fn(rows, cols, |i, j| if i == j { S::one() } else { S::zero() });
    for (k, v) in reflectors.iter().enumerate().rev() {
        for j in 0..cols {
            let dot: S = v
                .iter()
                .enumerate()
                .map(|(i, &vi)| vi * q[(k + i, j)])
                .sum();
            for (i, &vi) in v.iter().enumerate() {
                q[(k + i, j)] -= two * vi * dot;
            }
        }
    }

    for k in 0..cols {
        if r[(k, k)] < S::zero() {
            for j in 0..cols {
                r[(k, j)] = -r[(k, j)];
            }
            for i in 0..rows {
                q[(i, k)] = -q[(i, k)];
            }
        }
    }
    Ok(QrFactors { q, r })
}

/// Orthonormal basis for the column space of `m` (the `Q` factor).
pub fn qr_orthonormalize<S: Scalar>(m: &Matrix<S>) -> Result<Matrix<S>, NumericsError> {
    qr_decompose(m).map(|f| f.q)
}
