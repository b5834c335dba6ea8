//! Tiny pre-norm transformer classifier with a hand-written reverse pass.
//!
//! Each block holds five adapted projections (`q`, `k`, `v`, `mlp_in`,
//! `mlp_out`) whose effective weights are `W₀ + Σ ΔW_s`. The backward pass
//! produces `∂L/∂W'` for every projection and maps it onto whichever
//! parameters are currently trainable: the active task adapter, the shared
//! bases while they are still open, the meta-prompt and unfrozen head blocks.

mod ops;
mod optim;

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

pub use ops::{cross_entropy, LayerNorm};
pub use optim::{AdamW, OptimizerConfig, Schedule};

use crate::dmp::{prepend, MetaPrompt};
use crate::flora::{read_u64, read_u8};
use crate::flora::{
    grad_bases, grad_coefficients, AdaptedLayer, Adaptation, FloraError, INIT_STD,
};
use crate::numerics::{Matrix, NumericsError, Rng};
use crate::scalar::Scalar;
use ops::{gelu, gelu_grad, masked_row_softmax, sinusoidal_positions, LnCache};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("input has width {got}, model embedding width is {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("sequence of {got} tokens exceeds the maximum of {max}")]
    SequenceTooLong { max: usize, got: usize },
    #[error("embed_dim {embed_dim} is not divisible by num_heads {num_heads}")]
    HeadSplit { embed_dim: usize, num_heads: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("forward tape was already consumed by a backward pass")]
    TapeConsumed,
    #[error("label {label} is outside the {classes} classes known so far")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("upstream gradient has shape {got:?}, expected {expected:?}")]
    UpstreamShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("parameter {0:?} is frozen")]
    Frozen(ParamKey),
    #[error("parameter {0:?} does not exist in this model")]
    UnknownParameter(ParamKey),
    #[error("loss became non-finite")]
    NonFiniteLoss,
    #[error(transparent)]
    Flora(#[from] FloraError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_hidden: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_heads: 4,
            num_layers: 2,
            mlp_hidden: 128,
            max_seq_len: 16,
        }
    }
}

/// Parameterization of every adapted projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterKind {
    Flora { r_max: usize, orthonormal: bool },
    PlainLora,
    Dense,
}

pub const SLOT_NAMES: [&str; 5] = ["q", "k", "v", "mlp_in", "mlp_out"];
const SLOTS: usize = 5;
const Q: usize = 0;
const K: usize = 1;
const V: usize = 2;
const MLP_IN: usize = 3;
const MLP_OUT: usize = 4;

/// Which of a two-factor pair a gradient belongs to (`M`/`N` or `A`/`B`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Factor {
    First,
    Second,
}

/// Identifies one trainable matrix. `layer` indexes adapted projections in
/// block-major order (`block * 5 + slot`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    Coeff { layer: usize, factor: Factor },
    Basis { layer: usize, factor: Factor },
    Lora { layer: usize, factor: Factor },
    Dense { layer: usize },
    Base { layer: usize },
    Prompt,
    Head { block: usize },
}

/// Gradients for exactly the trainable parameters, in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet<S> {
    entries: Vec<(ParamKey, Matrix<S>)>,
}

impl<S: Scalar> GradientSet<S> {
    pub fn get(&self, key: ParamKey) -> Option<&Matrix<S>> {
        self.entries.iter().find(|(k, _)| *k == key).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKey, &Matrix<S>)> {
        self.entries.iter().map(|(k, g)| (*k, g))
    }

    pub fn keys(&self) -> Vec<ParamKey> {
        self.entries.iter().map(|(k, _)| *k).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_abs(&self) -> S {
        self.entries
            .iter()
            .fold(S::zero(), |m, (_, g)| m.max(g.max_abs()))
    }

    /// Keeps only the entries whose key satisfies `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(ParamKey) -> bool) {
        self.entries.retain(|(k, _)| keep(*k));
    }

    fn push(&mut self, key: ParamKey, grad: Matrix<S>) {
        self.entries.push((key, grad));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<S> {
    pub ln1: LayerNorm<S>,
    pub ln2: LayerNorm<S>,
    layers: Vec<AdaptedLayer<S>>,
}

/// Classifier columns for one group of classes (one task in class-incremental
/// streams).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadBlock<S> {
    pub weights: Matrix<S>,
    pub frozen: bool,
}

#[derive(Clone, Debug)]
struct BlockTape<S> {
    ln1: LnCache<S>,
    y1: Matrix<S>,
    q: Matrix<S>,
    k: Matrix<S>,
    v: Matrix<S>,
    probs: Vec<Matrix<S>>,
    ln2: LnCache<S>,
    y2: Matrix<S>,
    u: Matrix<S>,
    g: Matrix<S>,
}

#[derive(Clone, Debug)]
struct ExampleTape<S> {
    blocks: Vec<BlockTape<S>>,
    final_ln: LnCache<S>,
    h_out: Matrix<S>,
    pooled: Vec<S>,
}

/// Intermediates of one forward pass, consumed by exactly one backward pass.
#[derive(Debug)]
pub struct ForwardTape<S> {
    examples: Vec<ExampleTape<S>>,
    weights: Vec<Matrix<S>>,
    head: Matrix<S>,
    prompt_len: usize,
    consumed: bool,
}

impl<S: Scalar> ForwardTape<S> {
    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Output embeddings `h_out` (`(m + N) × d`) per example.
    pub fn hidden_outputs(&self) -> Vec<&Matrix<S>> {
        self.examples.iter().map(|e| &e.h_out).collect()
    }

    /// Attention probability matrices, one per example, block and head.
    pub fn attention_probs(&self) -> impl Iterator<Item = &Matrix<S>> {
        self.examples
            .iter()
            .flat_map(|e| e.blocks.iter().flat_map(|b| b.probs.iter()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyTransformer<S> {
    config: ModelConfig,
    positional: Matrix<S>,
    blocks: Vec<Block<S>>,
    final_ln: LayerNorm<S>,
    head: Vec<HeadBlock<S>>,
    visible_blocks: usize,
    mask_prompt_keys: bool,
}

impl<S: Scalar> TinyTransformer<S> {
    /// Random backbone with `W₀ ~ N(0, 1/d_in)`, sinusoidal positions and one
    /// head block per entry of `head_layout`.
    pub fn new(
        config: ModelConfig,
        head_layout: &[usize],
        kind: AdapterKind,
        rng: &mut Rng,
    ) -> Result<Self, ModelError> {
        let d = config.embed_dim;
        if config.num_heads == 0 || d % config.num_heads != 0 {
            return Err(ModelError::HeadSplit {
                embed_dim: d,
                num_heads: config.num_heads,
            });
        }
        let mut blocks = Vec::with_capacity(config.num_layers);
        for b in 0..config.num_layers {
            let mut layers = Vec::with_capacity(SLOTS);
            for (slot, name) in SLOT_NAMES.iter().enumerate() {
                let (d_in, d_out) = match slot {
                    MLP_IN => (d, config.mlp_hidden),
                    MLP_OUT => (config.mlp_hidden, d),
                    _ => (d, d),
                };
                let std = 1.0 / (d_in as f64).sqrt();
                let w = Matrix::from_fn(d_in, d_out, |_, _| S::lit(std * rng.normal()));
                let name = format!("block{b}.{name}");
                let layer = match kind {
                    AdapterKind::Flora { r_max, orthonormal } => {
                        AdaptedLayer::factorized(name, w, r_max, rng, orthonormal)?
                    }
                    AdapterKind::PlainLora => AdaptedLayer::new(
                        name,
                        w,
                        Adaptation::PlainLora {
                            adapters: Vec::new(),
                        },
                    ),
                    AdapterKind::Dense => AdaptedLayer::new(
                        name,
                        w,
                        Adaptation::Dense {
                            delta: Matrix::zeros(d_in, d_out),
                        },
                    ),
                };
                layers.push(layer);
            }
            blocks.push(Block {
                ln1: LayerNorm::new(d),
                ln2: LayerNorm::new(d),
                layers,
            });
        }
        let mut model = Self {
            positional: sinusoidal_positions(config.max_seq_len, d),
            config,
            blocks,
            final_ln: LayerNorm::new(d),
            head: Vec::new(),
            visible_blocks: 0,
            mask_prompt_keys: false,
        };
        model.reset_head(head_layout, rng);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block<S>] {
        &self.blocks
    }

    pub fn num_adapted_layers(&self) -> usize {
        self.blocks.len() * SLOTS
    }

    pub fn adapted_layer(&self, index: usize) -> &AdaptedLayer<S> {
        &self.blocks[index / SLOTS].layers[index % SLOTS]
    }

    fn adapted_layer_mut(&mut self, index: usize) -> &mut AdaptedLayer<S> {
        &mut self.blocks[index / SLOTS].layers[index % SLOTS]
    }

    pub fn adapted_layers(&self) -> impl Iterator<Item = &AdaptedLayer<S>> {
        self.blocks.iter().flat_map(|b| b.layers.iter())
    }

    fn adapted_layers_mut(&mut self) -> impl Iterator<Item = &mut AdaptedLayer<S>> {
        self.blocks.iter_mut().flat_map(|b| b.layers.iter_mut())
    }

    /// Replaces the classifier with fresh blocks (`N(0, 0.02²)`), all hidden.
    pub fn reset_head(&mut self, head_layout: &[usize], rng: &mut Rng) {
        let d = self.config.embed_dim;
        self.head = head_layout
            .iter()
            .map(|&classes| HeadBlock {
                weights: Matrix::from_fn(d, classes, |_, _| S::lit(INIT_STD * rng.normal())),
                frozen: false,
            })
            .collect();
        self.visible_blocks = 0;
    }

    pub fn head_blocks(&self) -> &[HeadBlock<S>] {
        &self.head
    }

    pub fn set_visible_blocks(&mut self, count: usize) {
        self.visible_blocks = count.min(self.head.len());
    }

    pub fn visible_blocks(&self) -> usize {
        self.visible_blocks
    }

    pub fn visible_classes(&self) -> usize {
        self.head[..self.visible_blocks]
            .iter()
            .map(|b| b.weights.cols())
            .sum()
    }

    pub fn freeze_head_block(&mut self, block: usize) {
        if let Some(b) = self.head.get_mut(block) {
            b.frozen = true;
        }
    }

    /// Test hook: hide prompt positions from every attention query.
    pub fn set_mask_prompt_keys(&mut self, mask: bool) {
        self.mask_prompt_keys = mask;
    }

    /// Opens (or closes) the base weights for backbone pretraining.
    pub fn set_backbone_trainable(&mut self, trainable: bool) {
        for layer in self.adapted_layers_mut() {
            if trainable {
                layer.unfreeze_base_for_pretraining();
            } else {
                layer.freeze_base();
            }
        }
    }

    pub fn begin_task(&mut self, task_id: usize, rank: usize, rng: &mut Rng) -> Result<(), ModelError> {
        for layer in self.adapted_layers_mut() {
            layer.begin_task(task_id, rank, rng)?;
        }
        Ok(())
    }

    pub fn end_task(&mut self) -> Result<(), ModelError> {
        for layer in self.adapted_layers_mut() {
            layer.end_task()?;
        }
        Ok(())
    }

    pub fn discard_active(&mut self) {
        for layer in self.adapted_layers_mut() {
            layer.discard_active();
        }
    }

    pub fn effective_weights(&self) -> Result<Vec<Matrix<S>>, ModelError> {
        self.adapted_layers()
            .map(|l| l.effective_weight().map_err(ModelError::from))
            .collect()
    }

    fn visible_head(&self) -> Matrix<S> {
        let blocks: Vec<&Matrix<S>> = self.head[..self.visible_blocks]
            .iter()
            .map(|b| &b.weights)
            .collect();
        if blocks.is_empty() {
            return Matrix::zeros(self.config.embed_dim, 0);
        }
        Matrix::hstack(&blocks).expect("head blocks share the embedding width")
    }

    /// Logits over the visible classes plus the tape for [`Self::backward`].
    pub fn forward(
        &self,
        prompt: &MetaPrompt<S>,
        inputs: &[&Matrix<S>],
    ) -> Result<(Matrix<S>, ForwardTape<S>), ModelError> {
        let weights = self.effective_weights()?;
        let head = self.visible_head();
        let mut logits = Matrix::zeros(inputs.len(), head.cols());
        let mut examples = Vec::with_capacity(inputs.len());
        for (i, x) in inputs.iter().enumerate() {
            let tape = self.run_example(&weights, prompt, x)?;
            let row = pooled_logits(&tape.pooled, &head);
            logits.row_mut(i).copy_from_slice(&row);
            examples.push(tape);
        }
        Ok((
            logits,
            ForwardTape {
                examples,
                weights,
                head,
                prompt_len: prompt.m(),
                consumed: false,
            },
        ))
    }

    /// Logits only; nothing is recorded.
    pub fn predict(&self, prompt: &MetaPrompt<S>, inputs: &[&Matrix<S>]) -> Result<Matrix<S>, ModelError> {
        let weights = self.effective_weights()?;
        let head = self.visible_head();
        let mut logits = Matrix::zeros(inputs.len(), head.cols());
        for (i, x) in inputs.iter().enumerate() {
            let tape = self.run_example(&weights, prompt, x)?;
            logits
                .row_mut(i)
                .copy_from_slice(&pooled_logits(&tape.pooled, &head));
        }
        Ok(logits)
    }

    fn run_example(
        &self,
        weights: &[Matrix<S>],
        prompt: &MetaPrompt<S>,
        x: &Matrix<S>,
    ) -> Result<ExampleTape<S>, ModelError> {
        let d = self.config.embed_dim;
        if x.cols() != d {
            return Err(ModelError::InputWidth {
                expected: d,
                got: x.cols(),
            });
        }
        if x.rows() > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                max: self.config.max_seq_len,
                got: x.rows(),
            });
        }
        if prompt.d() != d {
            return Err(ModelError::InputWidth {
                expected: d,
                got: prompt.d(),
            });
        }
        let mut positioned = x.clone();
        positioned.add_assign(&self.positional.rows_range(0, x.rows()));
        let mut h = prepend(prompt, &positioned)?;
        let m = prompt.m();

        let mut block_tapes = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let w = &weights[b * SLOTS..(b + 1) * SLOTS];
            let (y1, ln1) = block.ln1.forward(&h);
            let q = y1.dot(&w[Q]);
            let k = y1.dot(&w[K]);
            let v = y1.dot(&w[V]);
            let (attn, probs) = self.attention(&q, &k, &v, m);
            let mut mid = h;
            mid.add_assign(&attn);
            let (y2, ln2) = block.ln2.forward(&mid);
            let u = y2.dot(&w[MLP_IN]);
            let g = u.map(gelu);
            let mut out = mid;
            out.add_assign(&g.dot(&w[MLP_OUT]));
            h = out;
            block_tapes.push(BlockTape {
                ln1,
                y1,
                q,
                k,
                v,
                probs,
                ln2,
                y2,
                u,
                g,
            });
        }
        let (h_out, final_ln) = self.final_ln.forward(&h);
        let n = x.rows();
        let mut pooled = vec![S::zero(); d];
        for i in m..m + n {
            for (p, &v) in pooled.iter_mut().zip(h_out.row(i)) {
                *p += v;
            }
        }
        let inv_n = S::one() / S::lit(n.max(1) as f64);
        for p in &mut pooled {
            *p *= inv_n;
        }
        Ok(ExampleTape {
            blocks: block_tapes,
            final_ln,
            h_out,
            pooled,
        })
    }

    fn attention(
        &self,
        q: &Matrix<S>,
        k: &Matrix<S>,
        v: &Matrix<S>,
        prompt_len: usize,
    ) -> (Matrix<S>, Vec<Matrix<S>>) {
        let heads = self.config.num_heads;
        let dh = self.config.embed_dim / heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let mask = self.mask_prompt_keys;
        let mut out = Matrix::zeros(q.rows(), self.config.embed_dim);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = q.columns(c0, c1);
            let kh = k.columns(c0, c1);
            let vh = v.columns(c0, c1);
            let scores = qh.dot_t(&kh).scaled(scale);
            let p = masked_row_softmax(&scores, |j| mask && j < prompt_len);
            let oh = p.dot(&vh);
            for i in 0..out.rows() {
                out.row_mut(i)[c0..c1].copy_from_slice(oh.row(i));
            }
            probs.push(p);
        }
        (out, probs)
    }

    /// Reverse pass from `∂L/∂logits` (`batch × visible classes`).
    pub fn backward(
        &self,
        tape: &mut ForwardTape<S>,
        loss_grad: &Matrix<S>,
    ) -> Result<GradientSet<S>, ModelError> {
        if tape.consumed {
            return Err(ModelError::TapeConsumed);
        }
        let expected = (tape.examples.len(), tape.head.cols());
        if loss_grad.shape() != expected {
            return Err(ModelError::UpstreamShape {
                expected,
                got: loss_grad.shape(),
            });
        }
        let d = self.config.embed_dim;
        let m = tape.prompt_len;
        // ∂L/∂head = Σ_e pooled_eᵀ · dlogits_e, ∂L/∂pooled_e = dlogits_e · headᵀ.
        let mut head_grad = Matrix::zeros(d, tape.head.cols());
        let mut upstream = Vec::with_capacity(tape.examples.len());
        for (e, ex) in tape.examples.iter().enumerate() {
            let dl = loss_grad.row(e);
            for (i, &p) in ex.pooled.iter().enumerate() {
                for (j, &g) in dl.iter().enumerate() {
                    head_grad[(i, j)] += p * g;
                }
            }
            let mut dpooled = vec![S::zero(); d];
            for (i, dp) in dpooled.iter_mut().enumerate() {
                *dp = tape.head.row(i).iter().zip(dl).map(|(&w, &g)| w * g).sum();
            }
            let t = ex.h_out.rows();
            let n = t - m;
            let inv_n = S::one() / S::lit(n.max(1) as f64);
            let mut dh = Matrix::zeros(t, d);
            for i in m..t {
                for (x, &g) in dh.row_mut(i).iter_mut().zip(&dpooled) {
                    *x = g * inv_n;
                }
            }
            upstream.push(dh);
        }
        let mut grads = self.backward_hidden(tape, &upstream)?;
        let mut offset = 0;
        for (b, block) in self.head[..self.visible_blocks].iter().enumerate() {
            let width = block.weights.cols();
            if !block.frozen {
                grads.push(ParamKey::Head { block: b }, head_grad.columns(offset, offset + width));
            }
            offset += width;
        }
        Ok(grads)
    }

    /// Reverse pass from `∂L/∂h_out` per example. Head gradients are not
    /// produced here.
    pub fn backward_hidden(
        &self,
        tape: &mut ForwardTape<S>,
        upstream: &[Matrix<S>],
    ) -> Result<GradientSet<S>, ModelError> {
        if tape.consumed {
            return Err(ModelError::TapeConsumed);
        }
        if upstream.len() != tape.examples.len() {
            return Err(ModelError::UpstreamShape {
                expected: (tape.examples.len(), 0),
                got: (upstream.len(), 0),
            });
        }
        for (u, ex) in upstream.iter().zip(&tape.examples) {
            if u.shape() != ex.h_out.shape() {
                return Err(ModelError::UpstreamShape {
                    expected: ex.h_out.shape(),
                    got: u.shape(),
                });
            }
        }
        tape.consumed = true;
        let examples = std::mem::take(&mut tape.examples);
        let m = tape.prompt_len;
        let d = self.config.embed_dim;

        let mut wgrads: Vec<Matrix<S>> = tape
            .weights
            .iter()
            .map(|w| Matrix::zeros(w.rows(), w.cols()))
            .collect();
        let mut prompt_grad = Matrix::zeros(m, d);

        for (ex, dh_out) in examples.iter().zip(upstream) {
            let mut dx = self.final_ln.backward(dh_out, &ex.final_ln);
            for b in (0..self.blocks.len()).rev() {
                let w = &tape.weights[b * SLOTS..(b + 1) * SLOTS];
                let wg = &mut wgrads[b * SLOTS..(b + 1) * SLOTS];
                dx = self.block_backward(&self.blocks[b], &ex.blocks[b], w, wg, dx, m);
            }
            for i in 0..m {
                for (p, &g) in prompt_grad.row_mut(i).iter_mut().zip(dx.row(i)) {
                    *p += g;
                }
            }
        }

        let mut grads = GradientSet::default();
        for (index, g) in wgrads.iter().enumerate() {
            self.layer_gradients(index, g, &mut grads)?;
        }
        if m > 0 {
            grads.push(ParamKey::Prompt, prompt_grad);
        }
        Ok(grads)
    }

    fn block_backward(
        &self,
        block: &Block<S>,
        t: &BlockTape<S>,
        w: &[Matrix<S>],
        wg: &mut [Matrix<S>],
        dx: Matrix<S>,
        prompt_len: usize,
    ) -> Matrix<S> {
        // MLP: out = mid + gelu(y2 W1) W2
        wg[MLP_OUT].add_assign(&t.g.t_dot(&dx));
        let dg = dx.dot_t(&w[MLP_OUT]);
        let mut du = dg;
        for (d, &u) in du.as_mut_slice().iter_mut().zip(t.u.as_slice()) {
            *d *= gelu_grad(u);
        }
        wg[MLP_IN].add_assign(&t.y2.t_dot(&du));
        let dy2 = du.dot_t(&w[MLP_IN]);
        let mut dmid = dx;
        dmid.add_assign(&block.ln2.backward(&dy2, &t.ln2));

        // Attention: mid = h + concat_h(P_h V_h)
        let heads = self.config.num_heads;
        let dh = self.config.embed_dim / heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let rows = dmid.rows();
        let mut dq = Matrix::zeros(rows, self.config.embed_dim);
        let mut dk = Matrix::zeros(rows, self.config.embed_dim);
        let mut dv = Matrix::zeros(rows, self.config.embed_dim);
        let _ = prompt_len;
        for h in 0..heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let d_out = dmid.columns(c0, c1);
            let p = &t.probs[h];
            let qh = t.q.columns(c0, c1);
            let kh = t.k.columns(c0, c1);
            let vh = t.v.columns(c0, c1);
            let dp = d_out.dot_t(&vh);
            let dvh = p.t_dot(&d_out);
            let mut ds = Matrix::zeros(rows, rows);
            for i in 0..rows {
                let dot: S = p.row(i).iter().zip(dp.row(i)).map(|(&a, &b)| a * b).sum();
                for j in 0..rows {
                    ds[(i, j)] = p[(i, j)] * (dp[(i, j)] - dot) * scale;
                }
            }
            let dqh = ds.dot(&kh);
            let dkh = ds.t_dot(&qh);
            for i in 0..rows {
                dq.row_mut(i)[c0..c1].copy_from_slice(dqh.row(i));
                dk.row_mut(i)[c0..c1].copy_from_slice(dkh.row(i));
                dv.row_mut(i)[c0..c1].copy_from_slice(dvh.row(i));
            }
        }
        wg[Q].add_assign(&t.y1.t_dot(&dq));
        wg[K].add_assign(&t.y1.t_dot(&dk));
        wg[V].add_assign(&t.y1.t_dot(&dv));
        let mut dy1 = dq.dot_t(&w[Q]);
        dy1.add_assign(&dk.dot_t(&w[K]));
        dy1.add_assign(&dv.dot_t(&w[V]));
        let mut dh_in = dmid;
        dh_in.add_assign(&block.ln1.backward(&dy1, &t.ln1));
        dh_in
    }

    /// Maps `∂L/∂W'` of one projection onto its trainable parameters.
    fn layer_gradients(
        &self,
        index: usize,
        grad_weight: &Matrix<S>,
        out: &mut GradientSet<S>,
    ) -> Result<(), ModelError> {
        let layer = self.adapted_layer(index);
        match layer.adaptation() {
            Adaptation::Factorized { bases, adapters } => {
                if let Some(active) = adapters.last().filter(|a| !a.is_frozen()) {
                    let (gm, gn) = grad_coefficients(bases, active, grad_weight)?;
                    out.push(ParamKey::Coeff { layer: index, factor: Factor::First }, gm);
                    out.push(ParamKey::Coeff { layer: index, factor: Factor::Second }, gn);
                    if !bases.is_frozen() {
                        let (ga, gb) = grad_bases(bases, active, grad_weight)?;
                        out.push(ParamKey::Basis { layer: index, factor: Factor::First }, ga);
                        out.push(ParamKey::Basis { layer: index, factor: Factor::Second }, gb);
                    }
                }
            }
            Adaptation::PlainLora { adapters } => {
                if let Some(active) = adapters.last().filter(|a| !a.frozen) {
                    // ΔW = A Bᵀ: ∂A = G B, ∂B = Gᵀ A
                    out.push(ParamKey::Lora { layer: index, factor: Factor::First }, grad_weight.dot(&active.b));
                    out.push(ParamKey::Lora { layer: index, factor: Factor::Second }, grad_weight.t_dot(&active.a));
                }
            }
            Adaptation::Dense { .. } => {
                out.push(ParamKey::Dense { layer: index }, grad_weight.clone());
            }
        }
        if !layer.is_base_frozen() {
            out.push(ParamKey::Base { layer: index }, grad_weight.clone());
        }
        Ok(())
    }

    /// Read access to any parameter, trainable or not.
    pub fn param<'a>(&'a self, prompt: &'a MetaPrompt<S>, key: ParamKey) -> Option<&'a Matrix<S>> {
        match key {
            ParamKey::Prompt => Some(prompt.tokens()),
            ParamKey::Head { block } => self.head.get(block).map(|b| &b.weights),
            ParamKey::Coeff { layer, factor } | ParamKey::Basis { layer, factor } | ParamKey::Lora { layer, factor }
                if layer >= self.num_adapted_layers() =>
            {
                let _ = factor;
                None
            }
            ParamKey::Dense { layer } | ParamKey::Base { layer } if layer >= self.num_adapted_layers() => None,
            ParamKey::Coeff { layer, factor } => {
                let a = self.adapted_layer(layer).task_adapters().last()?;
                Some(match factor {
                    Factor::First => a.m_coeff(),
                    Factor::Second => a.n_coeff(),
                })
            }
            ParamKey::Basis { layer, factor } => {
                let b = self.adapted_layer(layer).bases()?;
                Some(match factor {
                    Factor::First => b.a_shared(),
                    Factor::Second => b.b_shared(),
                })
            }
            ParamKey::Lora { layer, factor } => match self.adapted_layer(layer).adaptation() {
                Adaptation::PlainLora { adapters } => adapters.last().map(|a| match factor {
                    Factor::First => &a.a,
                    Factor::Second => &a.b,
                }),
                _ => None,
            },
            ParamKey::Dense { layer } => match self.adapted_layer(layer).adaptation() {
                Adaptation::Dense { delta } => Some(delta),
                _ => None,
            },
            ParamKey::Base { layer } => Some(self.adapted_layer(layer).base_weight()),
        }
    }

    /// Mutable access to a trainable parameter; frozen ones are refused.
    pub fn param_mut<'a>(
        &'a mut self,
        prompt: &'a mut MetaPrompt<S>,
        key: ParamKey,
    ) -> Result<&'a mut Matrix<S>, ModelError> {
        let layers = self.num_adapted_layers();
        let unknown = ModelError::UnknownParameter(key);
        match key {
            ParamKey::Prompt => Ok(prompt.tokens_mut()),
            ParamKey::Head { block } => {
                let b = self.head.get_mut(block).ok_or(unknown)?;
                if b.frozen {
                    return Err(ModelError::Frozen(key));
                }
                Ok(&mut b.weights)
            }
            ParamKey::Coeff { layer, factor } if layer < layers => {
                match self.adapted_layer_mut(layer).adaptation_mut() {
                    Adaptation::Factorized { adapters, .. } => {
                        let a = adapters.last_mut().ok_or(unknown)?;
                        let (m, n) = a.coeffs_mut().map_err(|_| ModelError::Frozen(key))?;
                        Ok(match factor {
                            Factor::First => m,
                            Factor::Second => n,
                        })
                    }
                    _ => Err(unknown),
                }
            }
            ParamKey::Basis { layer, factor } if layer < layers => {
                match self.adapted_layer_mut(layer).adaptation_mut() {
                    Adaptation::Factorized { bases, .. } => {
                        let (a, b) = bases.factors_mut().map_err(|_| ModelError::Frozen(key))?;
                        Ok(match factor {
                            Factor::First => a,
                            Factor::Second => b,
                        })
                    }
                    _ => Err(unknown),
                }
            }
            ParamKey::Lora { layer, factor } if layer < layers => {
                match self.adapted_layer_mut(layer).adaptation_mut() {
                    Adaptation::PlainLora { adapters } => {
                        let a = adapters.last_mut().ok_or(unknown)?;
                        if a.frozen {
                            return Err(ModelError::Frozen(key));
                        }
                        Ok(match factor {
                            Factor::First => &mut a.a,
                            Factor::Second => &mut a.b,
                        })
                    }
                    _ => Err(unknown),
                }
            }
            ParamKey::Dense { layer } if layer < layers => {
                match self.adapted_layer_mut(layer).adaptation_mut() {
                    Adaptation::Dense { delta } => Ok(delta),
                    _ => Err(unknown),
                }
            }
            ParamKey::Base { layer } if layer < layers => self
                .adapted_layer_mut(layer)
                .base_weight_mut()
                .ok_or(ModelError::Frozen(key)),
            _ => Err(unknown),
        }
    }

    /// Serialized bytes of every frozen base weight, in layer order.
    pub fn base_weight_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for layer in self.adapted_layers() {
            out.extend(layer.base_weight().to_bytes());
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let c = &self.config;
        for v in [c.embed_dim, c.num_heads, c.num_layers, c.mlp_hidden, c.max_seq_len] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        self.positional.write_to(w)?;
        for block in &self.blocks {
            write_ln(w, &block.ln1)?;
            write_ln(w, &block.ln2)?;
            for layer in &block.layers {
                layer.write_to(w)?;
            }
        }
        write_ln(w, &self.final_ln)?;
        w.write_all(&(self.head.len() as u64).to_le_bytes())?;
        for b in &self.head {
            b.weights.write_to(w)?;
            w.write_all(&[b.frozen as u8])?;
        }
        w.write_all(&(self.visible_blocks as u64).to_le_bytes())?;
        w.write_all(&[self.mask_prompt_keys as u8])
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, ModelError> {
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = read_u64(r)? as usize;
        }
        let config = ModelConfig {
            embed_dim: dims[0],
            num_heads: dims[1],
            num_layers: dims[2],
            mlp_hidden: dims[3],
            max_seq_len: dims[4],
        };
        if config.num_heads == 0 || config.embed_dim % config.num_heads != 0 {
            return Err(ModelError::HeadSplit {
                embed_dim: config.embed_dim,
                num_heads: config.num_heads,
            });
        }
        let positional = Matrix::read_from(r)?;
        let mut blocks = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let ln1 = read_ln(r)?;
            let ln2 = read_ln(r)?;
            let mut layers = Vec::with_capacity(SLOTS);
            for _ in 0..SLOTS {
                layers.push(AdaptedLayer::read_from(r)?);
            }
            blocks.push(Block { ln1, ln2, layers });
        }
        let final_ln = read_ln(r)?;
        let count = read_u64(r)? as usize;
        let mut head = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let weights = Matrix::read_from(r)?;
            let frozen = read_u8(r)? != 0;
            head.push(HeadBlock { weights, frozen });
        }
        let visible_blocks = (read_u64(r)? as usize).min(head.len());
        let mask_prompt_keys = read_u8(r)? != 0;
        Ok(Self {
            config,
            positional,
            blocks,
            final_ln,
            head,
            visible_blocks,
            mask_prompt_keys,
        })
    }
}

fn pooled_logits<S: Scalar>(pooled: &[S], head: &Matrix<S>) -> Vec<S> {
    let mut row = vec![S::zero(); head.cols()];
    for (i, &p) in pooled.iter().enumerate() {
        for (o, &w) in row.iter_mut().zip(head.row(i)) {
            *o += p * w;
        }
    }
    row
}

fn write_ln<S: Scalar>(w: &mut impl Write, ln: &LayerNorm<S>) -> std::io::Result<()> {
    let gain = Matrix::from_vec(1, ln.gain.len(), ln.gain.clone()).expect("row vector");
    let bias = Matrix::from_vec(1, ln.bias.len(), ln.bias.clone()).expect("row vector");
    gain.write_to(w)?;
    bias.write_to(w)
}

fn read_ln<S: Scalar>(r: &mut impl Read) -> Result<LayerNorm<S>, ModelError> {
    let gain = Matrix::<S>::read_from(r)?.into_vec();
    let bias = Matrix::<S>::read_from(r)?.into_vec();
    Ok(LayerNorm { gain, bias })
}

/// Token sequences with integer labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset<S> {
    pub inputs: Vec<Matrix<S>>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_refs(&self) -> Vec<&Matrix<S>> {
        self.inputs.iter().collect()
    }

    /// Inputs and labels for the given example indices.
    pub fn batch(&self, indices: &[usize]) -> (Vec<&Matrix<S>>, Vec<usize>) {
        (
            indices.iter().map(|&i| &self.inputs[i]).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// One optimizer step on a labelled batch; returns the mean cross-entropy.
pub fn train_step<S: Scalar>(
    model: &mut TinyTransformer<S>,
    prompt: &mut MetaPrompt<S>,
    inputs: &[&Matrix<S>],
    labels: &[usize],
    optimizer: &mut AdamW<S>,
) -> Result<S, ModelError> {
    let (loss, grads) = loss_and_gradients(model, prompt, inputs, labels)?;
    optimizer.step(model, prompt, &grads)?;
    Ok(loss)
}

/// Mean cross-entropy over the visible classes and its gradients.
pub fn loss_and_gradients<S: Scalar>(
    model: &TinyTransformer<S>,
    prompt: &MetaPrompt<S>,
    inputs: &[&Matrix<S>],
    labels: &[usize],
) -> Result<(S, GradientSet<S>), ModelError> {
    if inputs.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let classes = model.visible_classes();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(ModelError::LabelOutOfRange { label, classes });
    }
    let (logits, mut tape) = model.forward(prompt, inputs)?;
    let (loss, dlogits) = cross_entropy(&logits, labels);
    if !loss.is_finite() {
        return Err(ModelError::NonFiniteLoss);
    }
    let grads = model.backward(&mut tape, &dlogits)?;
    Ok((loss, grads))
}

/// Accuracy and mean cross-entropy over a labelled set, in chunks.
pub fn evaluate<S: Scalar>(
    model: &TinyTransformer<S>,
    prompt: &MetaPrompt<S>,
    inputs: &[&Matrix<S>],
    labels: &[usize],
) -> Result<(f64, f64), ModelError> {
    if inputs.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let classes = model.visible_classes();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(ModelError::LabelOutOfRange { label, classes });
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (chunk, chunk_labels) in inputs.chunks(64).zip(labels.chunks(64)) {
        let logits = model.predict(prompt, chunk)?;
        let (l, _) = cross_entropy(&logits, chunk_labels);
        loss += l.to_f64() * chunk.len() as f64;
        for (i, &label) in chunk_labels.iter().enumerate() {
            if argmax(logits.row(i)) == label {
                correct += 1;
            }
        }
    }
    let n = inputs.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
