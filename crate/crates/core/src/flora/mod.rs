//! Factorized low-rank adaptation.
//!
//! Every per-task update of a weight `W` (`d_input × d_output`) is
//! `ΔW_t = A_r M_t N_tᵀ B_rᵀ`, where `A_r`, `B_r` are the leading `r_t`
//! columns of a pair of shared bases that are trained on the first task and
//! then frozen, and `M_t`, `N_t` are small `r_t × r_t` coefficient matrices.

mod layer;

pub use layer::{AdaptedLayer, Adaptation, LoraAdapter};
pub(crate) use layer::{read_str, read_u64, read_u8, write_str};

use crate::numerics::{frobenius_inner, qr_decompose, Matrix, NumericsError, Rng};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum FloraError {
    #[error("r_max = {r_max} must lie in 1..={limit} for a {d_input}×{d_output} weight")]
    RankOutOfRange {
        r_max: usize,
        d_input: usize,
        d_output: usize,
        limit: usize,
    },
    #[error("adapter rank {rank} is not in 1..={r_max}")]
    RankMismatch { rank: usize, r_max: usize },
    #[error("coefficient matrices have shape {m:?} and {n:?}, expected {rank}×{rank}")]
    CoefficientShape {
        rank: usize,
        m: (usize, usize),
        n: (usize, usize),
    },
    #[error("shared bases are already frozen")]
    AlreadyFrozen,
    #[error("shared bases are frozen and cannot be modified")]
    BasesFrozen,
    #[error("adapter for task {0} is frozen and cannot be modified")]
    AdapterFrozen(usize),
    #[error("shared bases are not orthonormal (defect {defect:.3e}); enable orthonormal mode")]
    NotOrthonormal { defect: f64 },
    #[error("gradient has shape {got:?}, expected {expected:?}")]
    GradientShape {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("layer does not hold factorized adapters")]
    WrongAdaptation,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Tolerance on `‖AᵀA − I‖_F` for treating a basis as orthonormal.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-8;

/// Standard deviation of the Gaussian used for basis and coefficient init.
pub const INIT_STD: f64 = 0.02;

/// The frozen global factors spanning every task's update.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedBases<S> {
    a_shared: Matrix<S>,
    b_shared: Matrix<S>,
    r_max: usize,
    frozen: bool,
    orthonormal: bool,
}

impl<S: Scalar> SharedBases<S> {
    pub fn init(
        d_input: usize,
        d_output: usize,
        r_max: usize,
        rng: &mut Rng,
        orthonormal: bool,
    ) -> Result<Self, FloraError> {
        let limit = d_input.min(d_output);
        if r_max == 0 || r_max > limit {
            return Err(FloraError::RankOutOfRange {
                r_max,
                d_input,
                d_output,
                limit,
            });
        }
        let mut a = gaussian(d_input, r_max, INIT_STD, rng);
        let mut b = gaussian(d_output, r_max, INIT_STD, rng);
        if orthonormal {
            a = qr_decompose(&a)?.q;
            b = qr_decompose(&b)?.q;
        }
        Ok(Self {
            a_shared: a,
            b_shared: b,
            r_max,
            frozen: false,
            orthonormal,
        })
    }

    /// Assembles bases from explicit factors (checkpoint restore, fixtures).
    pub fn from_parts(
        a_shared: Matrix<S>,
        b_shared: Matrix<S>,
        frozen: bool,
        orthonormal: bool,
    ) -> Result<Self, FloraError> {
        let r_max = a_shared.cols();
        if b_shared.cols() != r_max {
            return Err(NumericsError::DimensionMismatch {
                op: "shared bases",
                left: a_shared.shape(),
                right: b_shared.shape(),
            }
            .into());
        }
        let limit = a_shared.rows().min(b_shared.rows());
        if r_max == 0 || r_max > limit {
            return Err(FloraError::RankOutOfRange {
                r_max,
                d_input: a_shared.rows(),
                d_output: b_shared.rows(),
                limit,
            });
        }
        Ok(Self {
            a_shared,
            b_shared,
            r_max,
            frozen,
            orthonormal,
        })
    }

    pub fn a_shared(&self) -> &Matrix<S> {
        &self.a_shared
    }

    pub fn b_shared(&self) -> &Matrix<S> {
        &self.b_shared
    }

    pub fn r_max(&self) -> usize {
        self.r_max
    }

    pub fn d_input(&self) -> usize {
        self.a_shared.rows()
    }

    pub fn d_output(&self) -> usize {
        self.b_shared.rows()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn orthonormal_mode(&self) -> bool {
        self.orthonormal
    }

    pub fn freeze(&mut self) -> Result<(), FloraError> {
        if self.frozen {
            return Err(FloraError::AlreadyFrozen);
        }
        self.frozen = true;
        Ok(())
    }

    /// Mutable access to `(A_shared, B_shared)` while still trainable.
    pub fn factors_mut(&mut self) -> Result<(&mut Matrix<S>, &mut Matrix<S>), FloraError> {
        if self.frozen {
            return Err(FloraError::BasesFrozen);
        }
        Ok((&mut self.a_shared, &mut self.b_shared))
    }

    /// Larger of `‖AᵀA − I‖_F` and `‖BᵀB − I‖_F`.
    pub fn orthonormality_defect(&self) -> f64 {
        let eye = Matrix::identity(self.r_max);
        let da = self.a_shared.t_dot(&self.a_shared).sub(&eye).map(|m| m.frobenius_norm());
        let db = self.b_shared.t_dot(&self.b_shared).sub(&eye).map(|m| m.frobenius_norm());
        da.unwrap_or(S::infinity())
            .max(db.unwrap_or(S::infinity()))
            .to_f64()
    }

    fn require_orthonormal(&self) -> Result<(), FloraError> {
        let defect = self.orthonormality_defect();
        if defect < ORTHONORMAL_TOLERANCE {
            Ok(())
        } else {
            Err(FloraError::NotOrthonormal { defect })
        }
    }

    fn leading(&self, rank: usize) -> (Matrix<S>, Matrix<S>) {
        (
            self.a_shared.leading_columns(rank),
            self.b_shared.leading_columns(rank),
        )
    }

    /// Re-orthonormalizes both bases by QR and folds the triangular factors
    /// into every adapter's coefficients, leaving each `ΔW` unchanged:
    /// `A = Q_A R_A`, `B = Q_B R_B` gives `M ← R_A[:r,:r] M`, `N ← R_B[:r,:r] N`.
    pub fn orthonormalize_absorbing(
        &mut self,
        adapters: &mut [TaskAdapter<S>],
    ) -> Result<(), FloraError> {
        if self.frozen {
            return Err(FloraError::BasesFrozen);
        }
        let fa = qr_decompose(&self.a_shared)?;
        let fb = qr_decompose(&self.b_shared)?;
        for adapter in adapters.iter_mut() {
            let r = adapter.rank;
            let ra = fa.r.leading_block(r);
            let rb = fb.r.leading_block(r);
            adapter.m_coeff = ra.dot(&adapter.m_coeff);
            adapter.n_coeff = rb.dot(&adapter.n_coeff);
        }
        self.a_shared = fa.q;
        self.b_shared = fb.q;
        Ok(())
    }
}

/// Per-task coefficient pair `(M_t, N_t)` at rank `r_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskAdapter<S> {
    task_id: usize,
    rank: usize,
    m_coeff: Matrix<S>,
    n_coeff: Matrix<S>,
    frozen: bool,
}

impl<S: Scalar> TaskAdapter<S> {
    /// `M_t ~ N(0, 0.02²)` and `N_t = 0`, so the update starts at zero.
    pub fn new(task_id: usize, rank: usize, r_max: usize, rng: &mut Rng) -> Result<Self, FloraError> {
        if rank == 0 || rank > r_max {
            return Err(FloraError::RankMismatch { rank, r_max });
        }
        Ok(Self {
            task_id,
            rank,
            m_coeff: gaussian(rank, rank, INIT_STD, rng),
            n_coeff: Matrix::zeros(rank, rank),
            frozen: false,
        })
    }

    pub fn from_parts(
        task_id: usize,
        m_coeff: Matrix<S>,
        n_coeff: Matrix<S>,
        frozen: bool,
    ) -> Result<Self, FloraError> {
        let rank = m_coeff.rows();
        if rank == 0 || m_coeff.shape() != (rank, rank) || n_coeff.shape() != (rank, rank) {
            return Err(FloraError::CoefficientShape {
                rank,
                m: m_coeff.shape(),
                n: n_coeff.shape(),
            });
        }
        Ok(Self {
            task_id,
            rank,
            m_coeff,
            n_coeff,
            frozen,
        })
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn m_coeff(&self) -> &Matrix<S> {
        &self.m_coeff
    }

    pub fn n_coeff(&self) -> &Matrix<S> {
        &self.n_coeff
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn coeffs_mut(&mut self) -> Result<(&mut Matrix<S>, &mut Matrix<S>), FloraError> {
        if self.frozen {
            return Err(FloraError::AdapterFrozen(self.task_id));
        }
        Ok((&mut self.m_coeff, &mut self.n_coeff))
    }

    fn check(&self, r_max: usize) -> Result<(), FloraError> {
        if self.rank == 0 || self.rank > r_max {
            return Err(FloraError::RankMismatch {
                rank: self.rank,
                r_max,
            });
        }
        if self.m_coeff.shape() != (self.rank, self.rank)
            || self.n_coeff.shape() != (self.rank, self.rank)
        {
            return Err(FloraError::CoefficientShape {
                rank: self.rank,
                m: self.m_coeff.shape(),
                n: self.n_coeff.shape(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.task_id as u64).to_le_bytes());
        out.extend_from_slice(&(self.rank as u64).to_le_bytes());
        out.extend(self.m_coeff.to_bytes());
        out.extend(self.n_coeff.to_bytes());
        out
    }
}

/// `ΔW_t = A[:, :r] · M_t · N_tᵀ · B[:, :r]ᵀ`.
pub fn delta_weight<S: Scalar>(
    bases: &SharedBases<S>,
    adapter: &TaskAdapter<S>,
) -> Result<Matrix<S>, FloraError> {
    adapter.check(bases.r_max)?;
    let (a_r, b_r) = bases.leading(adapter.rank);
    let left = a_r.dot(&adapter.m_coeff);
    let right = b_r.dot(&adapter.n_coeff);
    Ok(left.dot_t(&right))
}

/// `‖(I − Q Qᵀ) X‖_F` for orthonormal `Q` (column-space residual).
pub fn column_residual<S: Scalar>(x: &Matrix<S>, q: &Matrix<S>) -> S {
    let proj = q.dot(&q.t_dot(x));
    x.sub(&proj).map_or(S::infinity(), |m| m.frobenius_norm())
}

/// `‖X (I − Q Qᵀ)‖_F` for orthonormal `Q` (row-space residual).
pub fn row_residual<S: Scalar>(x: &Matrix<S>, q: &Matrix<S>) -> S {
    let proj = x.dot(q).dot_t(q);
    x.sub(&proj).map_or(S::infinity(), |m| m.frobenius_norm())
}

/// Residuals of `ΔW_t` outside the leading-`r_t` column and row spaces.
pub fn subspace_residual<S: Scalar>(
    bases: &SharedBases<S>,
    adapter: &TaskAdapter<S>,
) -> Result<(S, S), FloraError> {
    bases.require_orthonormal()?;
    let delta = delta_weight(bases, adapter)?;
    let (a_r, b_r) = bases.leading(adapter.rank);
    Ok((column_residual(&delta, &a_r), row_residual(&delta, &b_r)))
}

/// `⟨ΔW_i, ΔW_j⟩_F` from the full `d_input × d_output` updates.
pub fn interference_full<S: Scalar>(
    bases: &SharedBases<S>,
    first: &TaskAdapter<S>,
    second: &TaskAdapter<S>,
) -> Result<S, FloraError> {
    let d1 = delta_weight(bases, first)?;
    let d2 = delta_weight(bases, second)?;
    Ok(frobenius_inner(&d1, &d2)?)
}

/// `Tr(N_i M_iᵀ M_j N_jᵀ)`, equal to the full interference when both bases
/// are orthonormal. Coefficients of different ranks are zero-padded to the
/// larger rank.
pub fn interference_reduced<S: Scalar>(
    first: &TaskAdapter<S>,
    second: &TaskAdapter<S>,
) -> Result<S, FloraError> {
    first.check(usize::MAX)?;
    second.check(usize::MAX)?;
    let r = first.rank.max(second.rank);
    let m1 = first.m_coeff.padded(r, r);
    let n1 = first.n_coeff.padded(r, r);
    let m2 = second.m_coeff.padded(r, r);
    let n2 = second.n_coeff.padded(r, r);
    // N1 M1ᵀ M2 N2ᵀ
    let chain = n1.dot_t(&m1).dot(&m2).dot_t(&n2);
    Ok(chain.trace())
}

/// `(∂L/∂M_t, ∂L/∂N_t) = (A_rᵀ G B_r N_t, B_rᵀ Gᵀ A_r M_t)` for
/// `G = ∂L/∂ΔW_t`.
pub fn grad_coefficients<S: Scalar>(
    bases: &SharedBases<S>,
    adapter: &TaskAdapter<S>,
    grad_delta: &Matrix<S>,
) -> Result<(Matrix<S>, Matrix<S>), FloraError> {
    adapter.check(bases.r_max)?;
    let expected = (bases.d_input(), bases.d_output());
    if grad_delta.shape() != expected {
        return Err(FloraError::GradientShape {
            got: grad_delta.shape(),
            expected,
        });
    }
    let (a_r, b_r) = bases.leading(adapter.rank);
    let core = a_r.t_dot(grad_delta).dot(&b_r); // A_rᵀ G B_r
    let grad_m = core.dot(&adapter.n_coeff);
    let grad_n = core.t_dot(&adapter.m_coeff);
    Ok((grad_m, grad_n))
}

/// Gradients of the loss with respect to the full shared bases, for training
/// them on the first task. Columns past `r_t` receive zero gradient.
pub fn grad_bases<S: Scalar>(
    bases: &SharedBases<S>,
    adapter: &TaskAdapter<S>,
    grad_delta: &Matrix<S>,
) -> Result<(Matrix<S>, Matrix<S>), FloraError> {
    adapter.check(bases.r_max)?;
    let expected = (bases.d_input(), bases.d_output());
    if grad_delta.shape() != expected {
        return Err(FloraError::GradientShape {
            got: grad_delta.shape(),
            expected,
        });
    }
    let (a_r, b_r) = bases.leading(adapter.rank);
    let r_max = bases.r_max;
    // ∂L/∂A_r = G B_r N Mᵀ, ∂L/∂B_r = Gᵀ A_r M Nᵀ
    let grad_a = grad_delta.dot(&b_r).dot(&adapter.n_coeff).dot_t(&adapter.m_coeff);
    let grad_b = grad_delta.t_dot(&a_r).dot(&adapter.m_coeff).dot_t(&adapter.n_coeff);
    Ok((
        grad_a.padded(bases.d_input(), r_max),
        grad_b.padded(bases.d_output(), r_max),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    StandardLora,
    FloraPerTask,
    FloraSharedOnce,
}

/// Scalar counts: `r(d_input + d_output)` for a standard LoRA pair or the
/// one-time shared bases, `2r²` for an F-LoRA coefficient pair.
pub fn param_count(kind: ParamKind, d_input: usize, d_output: usize, r: usize) -> usize {
    match kind {
        ParamKind::StandardLora | ParamKind::FloraSharedOnce => r * (d_input + d_output),
        ParamKind::FloraPerTask => 2 * r * r,
    }
}

/// Total F-LoRA parameters over `tasks` tasks at a fixed rank.
pub fn flora_total(d_input: usize, d_output: usize, r: usize, tasks: usize) -> usize {
    param_count(ParamKind::FloraSharedOnce, d_input, d_output, r)
        + tasks * param_count(ParamKind::FloraPerTask, d_input, d_output, r)
}

pub(crate) fn gaussian<S: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix<S> {
    Matrix::from_fn(rows, cols, |_, _| S::lit(std * rng.normal()))
}

#[cfg(test)]
mod tests;
