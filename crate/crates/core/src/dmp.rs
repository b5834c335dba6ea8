//! Shared learnable meta-prompt prepended to every input sequence.

use crate::flora::INIT_STD;
use crate::model::{ForwardTape, ModelError, ParamKey, TinyTransformer};
use crate::numerics::{Matrix, NumericsError, Rng};
use crate::scalar::Scalar;

/// The `m × d` prompt matrix. `m = 0` disables prompting.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaPrompt<S> {
    tokens: Matrix<S>,
}

impl<S: Scalar> MetaPrompt<S> {
    pub fn new(m: usize, d: usize, rng: &mut Rng) -> Self {
        Self {
            tokens: Matrix::from_fn(m, d, |_, _| S::lit(INIT_STD * rng.normal())),
        }
    }

    pub fn disabled(d: usize) -> Self {
        Self {
            tokens: Matrix::zeros(0, d),
        }
    }

    pub fn from_tokens(tokens: Matrix<S>) -> Self {
        Self { tokens }
    }

    pub fn m(&self) -> usize {
        self.tokens.rows()
    }

    pub fn d(&self) -> usize {
        self.tokens.cols()
    }

    pub fn tokens(&self) -> &Matrix<S> {
        &self.tokens
    }

    pub fn tokens_mut(&mut self) -> &mut Matrix<S> {
        &mut self.tokens
    }
}

/// `[P; X]`: prompt rows first, then the input rows, both in order.
pub fn prepend<S: Scalar>(prompt: &MetaPrompt<S>, inputs: &Matrix<S>) -> Result<Matrix<S>, NumericsError> {
    if inputs.cols() != prompt.d() {
        return Err(NumericsError::DimensionMismatch {
            op: "prepend",
            left: prompt.tokens.shape(),
            right: inputs.shape(),
        });
    }
    if prompt.m() == 0 {
        return Ok(inputs.clone());
    }
    Matrix::vstack(&prompt.tokens, inputs)
}

/// Drops the first `m` rows, undoing [`prepend`].
pub fn strip<S: Scalar>(sequence: &Matrix<S>, m: usize) -> Matrix<S> {
    sequence.rows_range(m.min(sequence.rows()), sequence.rows())
}

/// `∂L/∂P` given `∂L/∂h_out` for every example of a recorded forward pass.
/// Consumes the tape.
pub fn grad_prompt<S: Scalar>(
    model: &TinyTransformer<S>,
    tape: &mut ForwardTape<S>,
    upstream: &[Matrix<S>],
) -> Result<Matrix<S>, ModelError> {
    let m = tape.prompt_len();
    let d = model.config().embed_dim;
    let grads = model.backward_hidden(tape, upstream)?;
    Ok(grads
        .get(ParamKey::Prompt)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(m, d)))
}
