use std::io::{Read, Write};

use super::{delta_weight, gaussian, FloraError, SharedBases, TaskAdapter, INIT_STD};
use crate::numerics::{Matrix, NumericsError, Rng};
use crate::scalar::Scalar;

/// Plain per-task LoRA pair `ΔW_t = A_t B_tᵀ`, the comparison baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<S> {
    pub task_id: usize,
    pub a: Matrix<S>,
    pub b: Matrix<S>,
    pub frozen: bool,
}

impl<S: Scalar> LoraAdapter<S> {
    pub fn new(task_id: usize, d_input: usize, d_output: usize, rank: usize, rng: &mut Rng) -> Self {
        Self {
            task_id,
            a: gaussian(d_input, rank, INIT_STD, rng),
            b: Matrix::zeros(d_output, rank),
            frozen: false,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn delta(&self) -> Matrix<S> {
        self.a.dot_t(&self.b)
    }
}

/// How a layer's incremental update is parameterized.
#[derive(Clone, Debug, PartialEq)]
pub enum Adaptation<S> {
    /// Shared bases plus per-task coefficient pairs.
    Factorized {
        bases: SharedBases<S>,
        adapters: Vec<TaskAdapter<S>>,
    },
    /// Independent per-task LoRA pairs.
    PlainLora { adapters: Vec<LoraAdapter<S>> },
    /// One full-rank update matrix, trained by every task in turn.
    Dense { delta: Matrix<S> },
}

const KIND_FACTORIZED: u8 = 0;
const KIND_PLAIN_LORA: u8 = 1;
const KIND_DENSE: u8 = 2;

/// Segment format version for [`AdaptedLayer::write_to`].
pub const LAYER_FORMAT_VERSION: u8 = 1;

/// A projection `W' = W + Σ ΔW_s` with a frozen pretrained `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedLayer<S> {
    name: String,
    base_weight: Matrix<S>,
    base_frozen: bool,
    adaptation: Adaptation<S>,
}

impl<S: Scalar> AdaptedLayer<S> {
    pub fn new(name: impl Into<String>, base_weight: Matrix<S>, adaptation: Adaptation<S>) -> Self {
        Self {
            name: name.into(),
            base_weight,
            base_frozen: true,
            adaptation,
        }
    }

    pub fn factorized(
        name: impl Into<String>,
        base_weight: Matrix<S>,
        r_max: usize,
        rng: &mut Rng,
        orthonormal: bool,
    ) -> Result<Self, FloraError> {
        let (d_in, d_out) = base_weight.shape();
        let bases = SharedBases::init(d_in, d_out, r_max, rng, orthonormal)?;
        Ok(Self::new(
            name,
            base_weight,
            Adaptation::Factorized {
                bases,
                adapters: Vec::new(),
            },
        ))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn base_weight(&self) -> &Matrix<S> {
        &self.base_weight
    }

    pub fn d_input(&self) -> usize {
        self.base_weight.rows()
    }

    pub fn d_output(&self) -> usize {
        self.base_weight.cols()
    }

    pub fn adaptation(&self) -> &Adaptation<S> {
        &self.adaptation
    }

    pub fn adaptation_mut(&mut self) -> &mut Adaptation<S> {
        &mut self.adaptation
    }

    pub fn is_base_frozen(&self) -> bool {
        self.base_frozen
    }

    /// Opens the base weight for backbone pretraining; only valid before any
    /// task has been learned.
    pub(crate) fn unfreeze_base_for_pretraining(&mut self) {
        self.base_frozen = false;
    }

    pub(crate) fn freeze_base(&mut self) {
        self.base_frozen = true;
    }

    pub fn base_weight_mut(&mut self) -> Option<&mut Matrix<S>> {
        if self.base_frozen {
            None
        } else {
            Some(&mut self.base_weight)
        }
    }

    pub fn bases(&self) -> Option<&SharedBases<S>> {
        match &self.adaptation {
            Adaptation::Factorized { bases, .. } => Some(bases),
            _ => None,
        }
    }

    pub fn task_adapters(&self) -> &[TaskAdapter<S>] {
        match &self.adaptation {
            Adaptation::Factorized { adapters, .. } => adapters,
            _ => &[],
        }
    }

    /// Sum of every adapter's update, frozen or active.
    pub fn total_delta(&self) -> Result<Matrix<S>, FloraError> {
        let mut total = Matrix::zeros(self.d_input(), self.d_output());
        match &self.adaptation {
            Adaptation::Factorized { bases, adapters } => {
                for a in adapters {
                    total.add_assign(&delta_weight(bases, a)?);
                }
            }
            Adaptation::PlainLora { adapters } => {
                for a in adapters {
                    total.add_assign(&a.delta());
                }
            }
            Adaptation::Dense { delta } => total.add_assign(delta),
        }
        Ok(total)
    }

    pub fn effective_weight(&self) -> Result<Matrix<S>, FloraError> {
        let mut w = self.total_delta()?;
        w.add_assign(&self.base_weight);
        Ok(w)
    }

    /// Attaches a fresh trainable adapter for `task_id` at `rank`. The dense
    /// baseline keeps its single update and ignores the rank.
    pub fn begin_task(&mut self, task_id: usize, rank: usize, rng: &mut Rng) -> Result<(), FloraError> {
        let (d_in, d_out) = (self.d_input(), self.d_output());
        match &mut self.adaptation {
            Adaptation::Factorized { bases, adapters } => {
                adapters.push(TaskAdapter::new(task_id, rank, bases.r_max(), rng)?);
            }
            Adaptation::PlainLora { adapters } => {
                let limit = d_in.min(d_out);
                if rank == 0 || rank > limit {
                    return Err(FloraError::RankMismatch { rank, r_max: limit });
                }
                adapters.push(LoraAdapter::new(task_id, d_in, d_out, rank, rng));
            }
            Adaptation::Dense { .. } => {}
        }
        Ok(())
    }

    /// Freezes the active adapter. On the first boundary the shared bases are
    /// re-orthonormalized (in orthonormal mode) and frozen as well.
    pub fn end_task(&mut self) -> Result<(), FloraError> {
        match &mut self.adaptation {
            Adaptation::Factorized { bases, adapters } => {
                if !bases.is_frozen() {
                    if bases.orthonormal_mode() {
                        bases.orthonormalize_absorbing(adapters)?;
                    }
                    bases.freeze()?;
                }
                if let Some(a) = adapters.last_mut() {
                    a.freeze();
                }
            }
            Adaptation::PlainLora { adapters } => {
                if let Some(a) = adapters.last_mut() {
                    a.frozen = true;
                }
            }
            Adaptation::Dense { .. } => {}
        }
        Ok(())
    }

    /// Removes the most recent adapter if it is still trainable.
    pub fn discard_active(&mut self) {
        match &mut self.adaptation {
            Adaptation::Factorized { adapters, .. } => {
                if adapters.last().is_some_and(|a| !a.is_frozen()) {
                    adapters.pop();
                }
            }
            Adaptation::PlainLora { adapters } => {
                if adapters.last().is_some_and(|a| !a.frozen) {
                    adapters.pop();
                }
            }
            Adaptation::Dense { .. } => {}
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&[LAYER_FORMAT_VERSION])?;
        write_str(w, &self.name)?;
        self.base_weight.write_to(w)?;
        w.write_all(&[self.base_frozen as u8])?;
        match &self.adaptation {
            Adaptation::Factorized { bases, adapters } => {
                w.write_all(&[KIND_FACTORIZED])?;
                bases.a_shared().write_to(w)?;
                bases.b_shared().write_to(w)?;
                w.write_all(&[bases.is_frozen() as u8, bases.orthonormal_mode() as u8])?;
                w.write_all(&(adapters.len() as u64).to_le_bytes())?;
                for a in adapters {
                    w.write_all(&(a.task_id() as u64).to_le_bytes())?;
                    w.write_all(&(a.rank() as u64).to_le_bytes())?;
                    a.m_coeff().write_to(w)?;
                    a.n_coeff().write_to(w)?;
                    w.write_all(&[a.is_frozen() as u8])?;
                }
            }
            Adaptation::PlainLora { adapters } => {
                w.write_all(&[KIND_PLAIN_LORA])?;
                w.write_all(&(adapters.len() as u64).to_le_bytes())?;
                for a in adapters {
                    w.write_all(&(a.task_id as u64).to_le_bytes())?;
                    a.a.write_to(w)?;
                    a.b.write_to(w)?;
                    w.write_all(&[a.frozen as u8])?;
                }
            }
            Adaptation::Dense { delta } => {
                w.write_all(&[KIND_DENSE])?;
                delta.write_to(w)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, FloraError> {
        let version = read_u8(r)?;
        if version != LAYER_FORMAT_VERSION {
            return Err(NumericsError::Decode(format!("layer segment version {version}")).into());
        }
        let name = read_str(r)?;
        let base_weight = Matrix::read_from(r)?;
        let base_frozen = read_u8(r)? != 0;
        let adaptation = match read_u8(r)? {
            KIND_FACTORIZED => {
                let a = Matrix::read_from(r)?;
                let b = Matrix::read_from(r)?;
                let frozen = read_u8(r)? != 0;
                let orthonormal = read_u8(r)? != 0;
                let bases = SharedBases::from_parts(a, b, frozen, orthonormal)?;
                let count = read_u64(r)?;
                let mut adapters = Vec::new();
                for _ in 0..count {
                    let task_id = read_u64(r)? as usize;
                    let rank = read_u64(r)? as usize;
                    let m = Matrix::read_from(r)?;
                    let n = Matrix::read_from(r)?;
                    let frozen = read_u8(r)? != 0;
                    let adapter = TaskAdapter::from_parts(task_id, m, n, frozen)?;
                    if adapter.rank() != rank || rank > bases.r_max() {
                        return Err(FloraError::RankMismatch {
                            rank,
                            r_max: bases.r_max(),
                        });
                    }
                    adapters.push(adapter);
                }
                Adaptation::Factorized { bases, adapters }
            }
            KIND_PLAIN_LORA => {
                let count = read_u64(r)?;
                let mut adapters = Vec::new();
                for _ in 0..count {
                    let task_id = read_u64(r)? as usize;
                    let a = Matrix::read_from(r)?;
                    let b = Matrix::read_from(r)?;
                    let frozen = read_u8(r)? != 0;
                    adapters.push(LoraAdapter {
                        task_id,
                        a,
                        b,
                        frozen,
                    });
                }
                Adaptation::PlainLora { adapters }
            }
            KIND_DENSE => Adaptation::Dense {
                delta: Matrix::read_from(r)?,
            },
            other => {
                return Err(NumericsError::Decode(format!("unknown adaptation kind {other}")).into())
            }
        };
        Ok(Self {
            name,
            base_weight,
            base_frozen,
            adaptation,
        })
    }
}

pub(crate) fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u64).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

pub(crate) fn read_u8(r: &mut impl Read) -> Result<u8, NumericsError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b).map_err(NumericsError::from_io)?;
    Ok(b[0])
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64, NumericsError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(NumericsError::from_io)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_str(r: &mut impl Read) -> Result<String, NumericsError> {
    let len = read_u64(r)? as usize;
    if len > 1 << 20 {
        return Err(NumericsError::Decode("string too long".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(NumericsError::from_io)?;
    String::from_utf8(buf).map_err(|e| NumericsError::Decode(e.to_string()))
}
