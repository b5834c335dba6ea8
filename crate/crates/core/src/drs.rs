//! Dynamic rank selection from a complexity-conditioned softmax over
//! candidate ranks.

use serde::{Deserialize, Serialize};

use crate::dmp::MetaPrompt;
use crate::model::{evaluate, train_step, AdamW, Dataset, ModelError, OptimizerConfig, Schedule, TinyTransformer};
use crate::numerics::{gumbel_sample, softmax, Rng};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum DrsError {
    #[error("candidate rank list is empty")]
    NoCandidates,
    #[error("candidate ranks must be strictly increasing and positive, got {0:?}")]
    BadCandidates(Vec<usize>),
    #[error("largest candidate rank {max} exceeds r_max {r_max}")]
    ExceedsRMax { max: usize, r_max: usize },
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("complexity value must be finite, got {0}")]
    NonFiniteComplexity(f64),
    #[error("expected {expected} values (one per candidate), got {got}")]
    CandidateCount { expected: usize, got: usize },
    #[error("selector weights became non-finite")]
    NonFiniteWeights,
    #[error("probe needs non-empty train and validation splits")]
    EmptySplit,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Candidate ranks with one learnable weight each and a temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSelector {
    candidates: Vec<usize>,
    weights: Vec<f64>,
    temperature: f64,
}

impl RankSelector {
    /// Weights start at `r / max_candidate`, so larger ranks begin favoured.
    pub fn new(candidates: Vec<usize>, temperature: f64, r_max: usize) -> Result<Self, DrsError> {
        let max = *candidates.last().ok_or(DrsError::NoCandidates)?;
        let weights = candidates.iter().map(|&r| r as f64 / max as f64).collect();
        Self::with_weights(candidates, weights, temperature, r_max)
    }

    pub fn with_weights(
        candidates: Vec<usize>,
        weights: Vec<f64>,
        temperature: f64,
        r_max: usize,
    ) -> Result<Self, DrsError> {
        let max = *candidates.last().ok_or(DrsError::NoCandidates)?;
        if candidates[0] == 0 || candidates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DrsError::BadCandidates(candidates));
        }
        if max > r_max {
            return Err(DrsError::ExceedsRMax { max, r_max });
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(DrsError::BadTemperature(temperature));
        }
        if weights.len() != candidates.len() {
            return Err(DrsError::CandidateCount {
                expected: candidates.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(DrsError::NonFiniteWeights);
        }
        Ok(Self {
            candidates,
            weights,
            temperature,
        })
    }

    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn smallest(&self) -> usize {
        self.candidates[0]
    }

    fn logits(&self, h: f64) -> Vec<f64> {
        self.weights.iter().map(|w| w * h).collect()
    }
}

/// Validation loss of a short probe run, used as the task complexity `H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityEstimate {
    pub task_id: usize,
    pub h_value: f64,
    pub probe_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Argmax,
    GumbelSample,
}

/// `p(r) = softmax_r(w_r · H / τ)`.
pub fn rank_distribution(selector: &RankSelector, h: &ComplexityEstimate) -> Result<Vec<f64>, DrsError> {
    if !h.h_value.is_finite() {
        return Err(DrsError::NonFiniteComplexity(h.h_value));
    }
    Ok(softmax(&selector.logits(h.h_value), selector.temperature)
        .expect("temperature validated at construction"))
}

/// Argmax of the distribution (ties go to the smallest rank), or argmax of
/// Gumbel-perturbed logits.
pub fn select_rank(
    selector: &RankSelector,
    h: &ComplexityEstimate,
    mode: SelectionMode,
    rng: &mut Rng,
) -> Result<usize, DrsError> {
    if !h.h_value.is_finite() {
        return Err(DrsError::NonFiniteComplexity(h.h_value));
    }
    let index = match mode {
        // For H > 0 the logits are a positive multiple of the weights, so the
        // weights decide the order directly; H = 0 makes every logit equal.
        SelectionMode::Argmax if h.h_value > 0.0 => first_max(&selector.weights),
        SelectionMode::Argmax if h.h_value < 0.0 => first_max(&selector.weights.iter().map(|w| -w).collect::<Vec<_>>()),
        SelectionMode::Argmax => 0,
        SelectionMode::GumbelSample => {
            let tau = selector.temperature;
            let perturbed: Vec<f64> = selector
                .logits(h.h_value)
                .iter()
                .map(|l| l / tau + gumbel_sample(rng))
                .collect();
            first_max(&perturbed)
        }
    };
    Ok(selector.candidates[index])
}

fn first_max(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One gradient step on the expected probe loss `Σ_r p(r) loss_r`:
/// `∂/∂w_r = (H/τ) p_r (loss_r − Σ p loss)`.
pub fn update_selector_weights(
    selector: &RankSelector,
    h: &ComplexityEstimate,
    rank_losses: &[f64],
    step_size: f64,
) -> Result<RankSelector, DrsError> {
    if rank_losses.len() != selector.candidates.len() {
        return Err(DrsError::CandidateCount {
            expected: selector.candidates.len(),
            got: rank_losses.len(),
        });
    }
    let p = rank_distribution(selector, h)?;
    // Centre on the first loss so that equal losses give an exactly zero step.
    let anchor = rank_losses[0];
    let centred: Vec<f64> = rank_losses.iter().map(|l| l - anchor).collect();
    let expected: f64 = p.iter().zip(&centred).map(|(p, l)| p * l).sum();
    let scale = h.h_value / selector.temperature;
    let weights: Vec<f64> = selector
        .weights
        .iter()
        .zip(&p)
        .zip(&centred)
        .map(|((w, p), l)| w - step_size * scale * p * (l - expected))
        .collect();
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(DrsError::NonFiniteWeights);
    }
    Ok(RankSelector {
        weights,
        ..selector.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            batch_size: 16,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Trains a throwaway adapter of `rank` on a clone of the model and prompt
/// and returns the mean validation cross-entropy. The inputs are untouched.
pub fn probe_loss<S: Scalar>(
    model: &TinyTransformer<S>,
    prompt: &MetaPrompt<S>,
    train: &Dataset<S>,
    val: &Dataset<S>,
    task_id: usize,
    rank: usize,
    config: &ProbeConfig,
    rng: &mut Rng,
) -> Result<f64, DrsError> {
    if train.is_empty() || val.is_empty() {
        return Err(DrsError::EmptySplit);
    }
    let mut model = model.clone();
    let mut prompt = prompt.clone();
    model.discard_active();
    model.begin_task(task_id, rank, rng)?;
    let mut optimizer = AdamW::new(config.optimizer.clone(), Schedule::Constant);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let batch = config.batch_size.max(1).min(train.len());
    for _ in 0..config.steps {
        if cursor + batch > order.len() {
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let (x, y) = train.batch(&order[cursor..cursor + batch]);
        cursor += batch;
        train_step(&mut model, &mut prompt, &x, &y, &mut optimizer)?;
    }
    let (_, loss) = evaluate(&model, &prompt, &val.input_refs(), &val.labels)?;
    Ok(loss)
}

/// `H` for a task: the probe loss at the smallest candidate rank.
pub fn estimate_complexity<S: Scalar>(
    model: &TinyTransformer<S>,
    prompt: &MetaPrompt<S>,
    train: &Dataset<S>,
    val: &Dataset<S>,
    task_id: usize,
    selector: &RankSelector,
    config: &ProbeConfig,
    rng: &mut Rng,
) -> Result<ComplexityEstimate, DrsError> {
    let h_value = probe_loss(model, prompt, train, val, task_id, selector.smallest(), config, rng)?;
    Ok(ComplexityEstimate {
        task_id,
        h_value,
        probe_steps: config.steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdapterKind, ModelConfig};
    use crate::numerics::{Matrix, Rng};
    use proptest::prelude::*;

    fn est(h: f64) -> ComplexityEstimate {
        ComplexityEstimate {
            task_id: 0,
            h_value: h,
            probe_steps: 0,
        }
    }

    fn selector(weights: &[f64], tau: f64) -> RankSelector {
        let candidates: Vec<usize> = (1..=weights.len()).map(|i| 2 * i).collect();
        RankSelector::with_weights(candidates, weights.to_vec(), tau, 64).unwrap()
    }

    #[test]
    fn construction_contracts() {
        let s = RankSelector::new(vec![2, 4, 8], 1.0, 8).unwrap();
        assert_eq!(s.weights(), &[0.25, 0.5, 1.0]);
        assert!(matches!(RankSelector::new(vec![], 1.0, 8), Err(DrsError::NoCandidates)));
        assert!(matches!(RankSelector::new(vec![4, 2], 1.0, 8), Err(DrsError::BadCandidates(_))));
        assert!(matches!(RankSelector::new(vec![4, 4], 1.0, 8), Err(DrsError::BadCandidates(_))));
        assert!(matches!(RankSelector::new(vec![4, 16], 1.0, 8), Err(DrsError::ExceedsRMax { .. })));
        assert!(matches!(RankSelector::new(vec![4], 0.0, 8), Err(DrsError::BadTemperature(_))));
    }

    #[test]
    fn distribution_closed_forms() {
        let s = selector(&[0.3, 1.7, 2.2], 0.5);
        let p = rank_distribution(&s, &est(0.0)).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));

        let s = selector(&[1.5, 1.5], 1.0);
        let p = rank_distribution(&s, &est(42.0)).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);

        let s = selector(&[1.0, 2.0], 1.0);
        let p = rank_distribution(&s, &est(3.0)).unwrap();
        let (e3, e6) = (3f64.exp(), 6f64.exp());
        assert!((p[0] - e3 / (e3 + e6)).abs() < 1e-15);
        assert!((p[1] - e6 / (e3 + e6)).abs() < 1e-15);
        assert!((p[0] - 0.0474).abs() < 1e-4);

        assert!(matches!(
            rank_distribution(&s, &est(f64::NAN)),
            Err(DrsError::NonFiniteComplexity(_))
        ));
    }

    #[test]
    fn argmax_picks_largest_weight_and_breaks_ties_low() {
        let mut rng = Rng::new(0);
        let s = selector(&[1.0, 2.0, 3.0, 4.0], 1.0);
        assert_eq!(select_rank(&s, &est(0.7), SelectionMode::Argmax, &mut rng).unwrap(), 8);
        let tied = selector(&[1.0, 3.0, 3.0], 1.0);
        assert_eq!(select_rank(&tied, &est(2.0), SelectionMode::Argmax, &mut rng).unwrap(), 4);
        assert_eq!(select_rank(&s, &est(0.0), SelectionMode::Argmax, &mut rng).unwrap(), 2);
    }

    fn top_frequency(h: f64, draws: usize, seed: u64) -> f64 {
        let s = selector(&[1.0, 2.0], 1.0);
        let mut rng = Rng::new(seed);
        let hits = (0..draws)
            .filter(|_| select_rank(&s, &est(h), SelectionMode::GumbelSample, &mut rng).unwrap() == 4)
            .count();
        hits as f64 / draws as f64
    }

    #[test]
    fn gumbel_frequency_tracks_complexity() {
        let low = top_frequency(0.01, 10_000, 1);
        let mid = top_frequency(1.0, 10_000, 2);
        let high = top_frequency(100.0, 10_000, 3);
        // Gumbel-max samples exactly from the softmax, so the oracle is p_top.
        for (f, h) in [(low, 0.01), (mid, 1.0), (high, 100.0)] {
            let p = rank_distribution(&selector(&[1.0, 2.0], 1.0), &est(h)).unwrap()[1];
            assert!((f - p).abs() < 0.05, "H={h}: {f} vs {p}");
        }
        assert!(low < mid && mid < high);
        assert!((low - 0.5).abs() < 0.05);
        assert!((high - 1.0).abs() < 0.05);
    }

    #[test]
    fn temperature_sharpens_the_distribution() {
        let s = |tau| selector(&[0.2, 0.9, 0.5], tau);
        let mut last = 0.0;
        for tau in [4.0, 2.0, 1.0, 0.5, 0.25] {
            let p = rank_distribution(&s(tau), &est(1.3)).unwrap();
            assert!(p[1] >= last);
            last = p[1];
        }
    }

    #[test]
    fn weight_update_contracts() {
        let s = selector(&[0.25, 0.5, 1.0], 1.0);
        let h = est(1.2);
        assert_eq!(update_selector_weights(&s, &h, &[0.7, 0.7, 0.7], 0.5).unwrap(), s);
        assert_eq!(update_selector_weights(&s, &h, &[0.9, 0.1, 0.4], 0.0).unwrap(), s);
        assert!(matches!(
            update_selector_weights(&s, &h, &[0.1], 0.5),
            Err(DrsError::CandidateCount { expected: 3, got: 1 })
        ));

        let mut current = s;
        let mut previous = current.weights()[0];
        for _ in 0..12 {
            current = update_selector_weights(&current, &h, &[0.2, 0.6, 0.9], 1.0).unwrap();
            assert!(current.weights()[0] > previous);
            previous = current.weights()[0];
        }
    }

    fn probe_fixture(separation: f64, classes: usize, seed: u64) -> (TinyTransformer<f64>, Dataset<f64>, Dataset<f64>) {
        let mut rng = Rng::new(seed);
        let config = ModelConfig {
            embed_dim: 8,
            num_heads: 2,
            num_layers: 1,
            mlp_hidden: 16,
            max_seq_len: 4,
        };
        let kind = AdapterKind::Flora {
            r_max: 4,
            orthonormal: true,
        };
        let mut model = TinyTransformer::new(config, &[classes], kind, &mut rng).unwrap();
        model.set_visible_blocks(1);
        let means: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..8).map(|_| separation * rng.normal() / 8f64.sqrt()).collect())
            .collect();
        let mut make = |n: usize| {
            let mut data = Dataset::default();
            for i in 0..n {
                let c = i % classes;
                data.inputs.push(Matrix::from_fn(4, 8, |_, j| means[c][j] + rng.normal()));
                data.labels.push(c);
            }
            data
        };
        let train = make(60);
        let val = make(30);
        (model, train, val)
    }

    #[test]
    fn untrained_probe_on_indistinguishable_classes_is_near_ln_c() {
        let (model, train, val) = probe_fixture(0.0, 3, 4);
        let s = RankSelector::new(vec![2, 4], 1.0, 4).unwrap();
        let cfg = ProbeConfig {
            steps: 0,
            ..Default::default()
        };
        let prompt = MetaPrompt::disabled(8);
        let h = estimate_complexity(&model, &prompt, &train, &val, 0, &s, &cfg, &mut Rng::new(1)).unwrap();
        let ln_c = 3f64.ln();
        assert!((h.h_value - ln_c).abs() < 0.2 * ln_c, "{}", h.h_value);
    }

    #[test]
    fn probe_leaves_model_untouched_and_ranks_tasks() {
        let (model, train, val) = probe_fixture(6.0, 2, 5);
        let prompt = MetaPrompt::new(2, 8, &mut Rng::new(9));
        let before = (model.clone(), prompt.clone());
        let s = RankSelector::new(vec![2, 4], 1.0, 4).unwrap();
        let cfg = ProbeConfig {
            optimizer: OptimizerConfig {
                lr: 1e-2,
                ..Default::default()
            },
            ..Default::default()
        };
        let easy = estimate_complexity(&model, &prompt, &train, &val, 0, &s, &cfg, &mut Rng::new(2)).unwrap();
        assert_eq!(before, (model.clone(), prompt.clone()));

        // Same inputs with labels scrambled: nothing learnable.
        let mut rng = Rng::new(3);
        let scramble = |d: &Dataset<f64>, rng: &mut Rng| {
            let mut d = d.clone();
            rng.shuffle(&mut d.labels);
            d
        };
        let (ptrain, pval) = (scramble(&train, &mut rng), scramble(&val, &mut rng));
        let hard = estimate_complexity(&model, &prompt, &ptrain, &pval, 0, &s, &cfg, &mut Rng::new(2)).unwrap();
        assert!(easy.h_value < hard.h_value, "{} vs {}", easy.h_value, hard.h_value);
        assert_eq!(easy.probe_steps, 50);

        let empty = Dataset::default();
        assert!(matches!(
            estimate_complexity(&model, &prompt, &train, &empty, 0, &s, &cfg, &mut Rng::new(2)),
            Err(DrsError::EmptySplit)
        ));
    }

    proptest! {
        #[test]
        fn distribution_is_valid(
            weights in proptest::collection::vec(-1.0f64..1.0, 1..6),
            h in 0.0f64..10.0,
            tau in 0.5f64..5.0,
        ) {
            // Logit spread stays below 40, so no entry underflows to zero.
            let s = selector(&weights, tau);
            let p = rank_distribution(&s, &est(h)).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0 && x < 1.0) || p.len() == 1);
        }

        #[test]
        fn argmax_is_scale_invariant(
            weights in proptest::collection::vec(-3.0f64..3.0, 1..6),
            h in 1e-3f64..50.0,
        ) {
            let s = selector(&weights, 1.0);
            let mut rng = Rng::new(0);
            let base = select_rank(&s, &est(h), SelectionMode::Argmax, &mut rng).unwrap();
            for c in [0.1, 1.0, 10.0, 100.0] {
                prop_assert_eq!(select_rank(&s, &est(c * h), SelectionMode::Argmax, &mut rng).unwrap(), base);
            }
            prop_assert!(s.candidates().contains(&base));
        }

        #[test]
        fn sampled_rank_is_a_candidate(seed in any::<u64>(), h in 0.0f64..10.0) {
            let s = RankSelector::new(vec![2, 4, 8], 0.7, 8).unwrap();
            let r = select_rank(&s, &est(h), SelectionMode::GumbelSample, &mut Rng::new(seed)).unwrap();
            prop_assert!(s.candidates().contains(&r) && r <= 8);
        }
    }
}
