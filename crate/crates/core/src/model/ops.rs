use crate::numerics::Matrix;
use crate::scalar::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Per-row layer norm with fixed gain and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<S> {
    pub gain: Vec<S>,
    pub bias: Vec<S>,
}

#[derive(Clone, Debug)]
pub(crate) struct LnCache<S> {
    pub xhat: Matrix<S>,
    pub inv_std: Vec<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: vec![S::one(); dim],
            bias: vec![S::zero(); dim],
        }
    }

    pub(crate) fn forward(&self, x: &Matrix<S>) -> (Matrix<S>, LnCache<S>) {
        let (rows, cols) = x.shape();
        let n = S::lit(cols as f64);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let inv = S::one() / (var + S::lit(LN_EPS)).sqrt();
            inv_std.push(inv);
            for j in 0..cols {
                let h = (row[j] - mean) * inv;
                xhat[(i, j)] = h;
                out[(i, j)] = h * self.gain[j] + self.bias[j];
            }
        }
        (out, LnCache { xhat, inv_std })
    }

    pub(crate) fn backward(&self, dy: &Matrix<S>, cache: &LnCache<S>) -> Matrix<S> {
        let (rows, cols) = dy.shape();
        let n = S::lit(cols as f64);
        let mut dx = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut mean_dxhat = S::zero();
            let mut mean_dxhat_xhat = S::zero();
            for j in 0..cols {
                let g = dy[(i, j)] * self.gain[j];
                mean_dxhat += g;
                mean_dxhat_xhat += g * cache.xhat[(i, j)];
            }
            mean_dxhat /= n;
            mean_dxhat_xhat /= n;
            for j in 0..cols {
                let g = dy[(i, j)] * self.gain[j];
                dx[(i, j)] =
                    cache.inv_std[i] * (g - mean_dxhat - cache.xhat[(i, j)] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu<S: Scalar>(u: S) -> S {
    let inner = S::lit(GELU_C) * (u + S::lit(GELU_A) * u * u * u);
    S::lit(0.5) * u * (S::one() + inner.tanh())
}

pub(crate) fn gelu_grad<S: Scalar>(u: S) -> S {
    let inner = S::lit(GELU_C) * (u + S::lit(GELU_A) * u * u * u);
    let t = inner.tanh();
    let dinner = S::lit(GELU_C) * (S::one() + S::lit(3.0 * GELU_A) * u * u);
    S::lit(0.5) * (S::one() + t) + S::lit(0.5) * u * (S::one() - t * t) * dinner
}

/// Row-wise softmax of `scores`, treating entries where `masked(j)` as −∞.
pub(crate) fn masked_row_softmax<S: Scalar>(
    scores: &Matrix<S>,
    masked: impl Fn(usize) -> bool,
) -> Matrix<S> {
    let (rows, cols) = scores.shape();
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let row = scores.row(i);
        let mut max = S::neg_infinity();
        for (j, &s) in row.iter().enumerate() {
            if !masked(j) {
                max = max.max(s);
            }
        }
        let mut total = S::zero();
        for j in 0..cols {
            if !masked(j) {
                let e = (row[j] - max).exp();
                out[(i, j)] = e;
                total += e;
            }
        }
        for x in out.row_mut(i) {
            *x /= total;
        }
    }
    out
}

/// Mean cross-entropy over rows and its gradient with respect to `logits`.
pub fn cross_entropy<S: Scalar>(logits: &Matrix<S>, labels: &[usize]) -> (S, Matrix<S>) {
    let (rows, cols) = logits.shape();
    debug_assert_eq!(rows, labels.len());
    let scale = S::one() / S::lit(rows.max(1) as f64);
    let mut loss = S::zero();
    let mut grad = Matrix::zeros(rows, cols);
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
        let sum: S = row.iter().map(|&x| (x - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for j in 0..cols {
            let p = (row[j] - log_z).exp();
            grad[(i, j)] = scale * (p - if j == label { S::one() } else { S::zero() });
        }
    }
    (loss * scale, grad)
}

/// Sinusoidal position table `rows × dim`.
pub(crate) fn sinusoidal_positions<S: Scalar>(rows: usize, dim: usize) -> Matrix<S> {
    Matrix::from_fn(rows, dim, |pos, j| {
        let pair = (j / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
        S::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &u in &[-3.0f64, -1.0, -0.1, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let numeric = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((numeric - gelu_grad(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_backward_matches_central_difference() {
        let mut rng = Rng::new(3);
        let mut ln = LayerNorm::<f64>::new(5);
        for j in 0..5 {
            ln.gain[j] = 1.0 + 0.3 * rng.normal();
            ln.bias[j] = 0.1 * rng.normal();
        }
        let x = Matrix::from_fn(3, 5, |_, _| rng.normal());
        let c = Matrix::from_fn(3, 5, |_, _| rng.normal());
        let loss = |x: &Matrix<f64>| {
            let (y, _) = ln.forward(x);
            crate::numerics::frobenius_inner(&y, &c).unwrap()
        };
        let (_, cache) = ln.forward(&x);
        let dx = ln.backward(&c, &cache);
        for i in 0..3 {
            for j in 0..5 {
                let mut p = x.clone();
                p[(i, j)] += 1e-6;
                let mut m = x.clone();
                m[(i, j)] -= 1e-6;
                let numeric = (loss(&p) - loss(&m)) / 2e-6;
                assert!((numeric - dx[(i, j)]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Matrix::<f64>::zeros(4, 3);
        let (loss, grad) = cross_entropy(&logits, &[0, 1, 2, 0]);
        assert!((loss - 3f64.ln()).abs() < 1e-15);
        for i in 0..4 {
            let s: f64 = grad.row(i).iter().sum();
            assert!(s.abs() < 1e-15);
        }
    }

    #[test]
    fn masked_softmax_rows_sum_to_one() {
        let mut rng = Rng::new(5);
        let s = Matrix::from_fn(4, 6, |_, _| 3.0 * rng.normal());
        let p = masked_row_softmax(&s, |j| j < 2);
        for i in 0..4 {
            let total: f64 = p.row(i).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert_eq!(p[(i, 0)], 0.0);
            assert_eq!(p[(i, 1)], 0.0);
        }
    }
}
