//! The invariant battery behind `fmlora verify`: each check recomputes a
//! property from scratch and reports pass or fail with a short detail line.

use crate::dmp::MetaPrompt;
use crate::drs::{select_rank, ComplexityEstimate, RankSelector, SelectionMode};
use crate::flora::{
    delta_weight, grad_coefficients, interference_full, interference_reduced, param_count, ParamKind,
    SharedBases, TaskAdapter,
};
use crate::harness::checkpoint::{decode, encode};
use crate::harness::{stream_for, RunConfig, RunState};
use crate::model::{
    cross_entropy, loss_and_gradients, AdapterKind, Factor, ModelConfig, ParamKey, TinyTransformer,
};
use crate::numerics::{frobenius_inner, Matrix, Rng};

/// Deliberate faults for exercising the failure path.
#[derive(Clone, Copy, Debug, Default)]
pub struct Hooks {
    /// Offsets one analytic gradient entry in each gradient check.
    pub corrupt_gradient: bool,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

const CORRUPTION: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-5 * analytic.abs().max(numeric.abs()) + 1e-8
}

fn check(name: &'static str, outcome: Result<String, String>) -> CheckResult {
    match outcome {
        Ok(detail) => CheckResult { name, passed: true, detail },
        Err(detail) => CheckResult { name, passed: false, detail },
    }
}

/// Runs every check in a fixed order.
pub fn run_battery(hooks: Hooks) -> Vec<CheckResult> {
    let run = short_run();
    vec![
        check("coefficient gradients", coefficient_gradients(hooks)),
        check("model gradients", model_gradients(hooks)),
        check("interference identity", interference_identity()),
        check("subspace containment", run.as_ref().map_err(Clone::clone).and_then(subspace_containment)),
        check("parameter accounting", run.as_ref().map_err(Clone::clone).and_then(parameter_accounting)),
        check("rehearsal-free and frozen history", run.as_ref().map_err(Clone::clone).and_then(history)),
        check("argmax scale invariance", argmax_invariance()),
        check("checkpoint round trip", run.as_ref().map_err(Clone::clone).and_then(checkpoint_round_trip)),
    ]
}

fn random(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| std * rng.normal())
}

/// `L(ΔW) = ⟨C, ΔW⟩ + ½‖ΔW‖²`, so `∂L/∂ΔW = C + ΔW`.
fn coefficient_gradients(hooks: Hooks) -> Result<String, String> {
    let mut rng = Rng::new(0x5eed_0001);
    let mut compared = 0usize;
    for fixture in 0..20 {
        let d_in = 2 + rng.below(15);
        let d_out = 2 + rng.below(15);
        let r_max = 1 + rng.below(4.min(d_in.min(d_out)));
        let rank = 1 + rng.below(r_max);
        let bases = SharedBases::init(d_in, d_out, r_max, &mut rng, true).map_err(|e| e.to_string())?;
        let adapter = TaskAdapter::from_parts(0, random(rank, rank, 1.0, &mut rng), random(rank, rank, 1.0, &mut rng), false)
            .map_err(|e| e.to_string())?;
        let c = random(d_in, d_out, 1.0, &mut rng);
        let loss = |ad: &TaskAdapter<f64>| {
            let dw = delta_weight(&bases, ad).unwrap();
            frobenius_inner(&c, &dw).unwrap() + 0.5 * dw.frobenius_norm_sq()
        };
        let g = c.add(&delta_weight(&bases, &adapter).unwrap()).unwrap();
        let (gm, gn) = grad_coefficients(&bases, &adapter, &g).map_err(|e| e.to_string())?;
        for (which, analytic) in [(0, &gm), (1, &gn)] {
            for idx in 0..rank * rank {
                let perturbed = |delta: f64| {
                    let mut m = adapter.m_coeff().clone();
                    let mut n = adapter.n_coeff().clone();
                    let target = if which == 0 { &mut m } else { &mut n };
                    target.as_mut_slice()[idx] += delta;
                    loss(&TaskAdapter::from_parts(0, m, n, false).unwrap())
                };
                let numeric = (perturbed(FD_STEP) - perturbed(-FD_STEP)) / (2.0 * FD_STEP);
                let mut a = analytic.as_slice()[idx];
                if hooks.corrupt_gradient && compared == 0 {
                    a += CORRUPTION;
                }
                compared += 1;
                if !close(a, numeric) {
                    let factor = if which == 0 { "M" } else { "N" };
                    return Err(format!("fixture {fixture}: ∂L/∂{factor}[{idx}] analytic {a:.8e} vs numeric {numeric:.8e}"));
                }
            }
        }
    }
    Ok(format!("{compared} entries over 20 fixtures"))
}

fn model_gradients(hooks: Hooks) -> Result<String, String> {
    let mut compared = 0usize;
    for seed in 0..4u64 {
        let mut rng = Rng::new(0x5eed_0100 + seed);
        let d = 8;
        let config = ModelConfig {
            embed_dim: d,
            num_heads: 2,
            num_layers: 1,
            mlp_hidden: 2 * d,
            max_seq_len: 6,
        };
        let kind = AdapterKind::Flora {
            r_max: 4,
            orthonormal: true,
        };
        let mut model = TinyTransformer::new(config, &[3], kind, &mut rng).map_err(|e| e.to_string())?;
        model.set_visible_blocks(1);
        model.begin_task(0, 1 + rng.below(4), &mut rng).map_err(|e| e.to_string())?;
        let mut prompt = MetaPrompt::new(2, d, &mut rng);
        for layer in 0..model.num_adapted_layers() {
            let key = ParamKey::Coeff {
                layer,
                factor: Factor::Second,
            };
            for x in model.param_mut(&mut prompt, key).map_err(|e| e.to_string())?.as_mut_slice() {
                *x = 0.3 * rng.normal();
            }
        }
        let prompt = MetaPrompt::from_tokens(prompt.tokens().scaled(20.0));
        let inputs: Vec<Matrix<f64>> = (0..3).map(|_| random(4, d, 1.0, &mut rng)).collect();
        let refs: Vec<&Matrix<f64>> = inputs.iter().collect();
        let labels = [0, 2, 1];
        let loss = |m: &TinyTransformer<f64>, p: &MetaPrompt<f64>| {
            cross_entropy(&m.predict(p, &refs).unwrap(), &labels).0
        };
        let (_, grads) = loss_and_gradients(&model, &prompt, &refs, &labels).map_err(|e| e.to_string())?;
        for (key, g) in grads.iter() {
            for idx in 0..g.as_slice().len() {
                let shifted = |delta: f64| {
                    let mut m = model.clone();
                    let mut p = prompt.clone();
                    m.param_mut(&mut p, key).unwrap().as_mut_slice()[idx] += delta;
                    loss(&m, &p)
                };
                let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
                let mut a = g.as_slice()[idx];
                if hooks.corrupt_gradient && compared == 0 {
                    a += CORRUPTION;
                }
                compared += 1;
                if !close(a, numeric) {
                    return Err(format!("seed {seed}: {key:?}[{idx}] analytic {a:.8e} vs numeric {numeric:.8e}"));
                }
            }
        }
    }
    Ok(format!("{compared} entries over 4 fixtures, prompt included"))
}

fn interference_identity() -> Result<String, String> {
    let mut rng = Rng::new(0x5eed_0200);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d_in = 4 + rng.below(13);
        let d_out = 4 + rng.below(13);
        let r_max = 1 + rng.below(4);
        let bases = SharedBases::init(d_in, d_out, r_max, &mut rng, true).map_err(|e| e.to_string())?;
        let adapter = |rng: &mut Rng| {
            let r = 1 + rng.below(r_max);
            TaskAdapter::from_parts(0, random(r, r, 1.0, rng), random(r, r, 1.0, rng), false).unwrap()
        };
        let (a, b) = (adapter(&mut rng), adapter(&mut rng));
        let full = interference_full(&bases, &a, &b).map_err(|e| e.to_string())?;
        let reduced = interference_reduced(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max((full - reduced).abs());
    }
    if worst < 1e-10 {
        Ok(format!("100 pairs, max |full − reduced| = {worst:.1e}"))
    } else {
        Err(format!("max |full − reduced| = {worst:.3e} ≥ 1e-10"))
    }
}

fn short_run() -> Result<RunState, String> {
    let mut c = RunConfig::default();
    c.stream.num_tasks = 3;
    c.stream.samples_per_class = 20;
    c.train.epochs = 2;
    c.drs.probe_steps = 5;
    c.drs.weight_steps = 1;
    c.dmp.m = 2;
    let stream = stream_for(&c).map_err(|e| e.to_string())?;
    let mut state = RunState::new(&c, &stream).map_err(|e| e.to_string())?;
    while !state.is_complete() {
        state.run_next_task(&stream).map_err(|e| e.to_string())?;
    }
    Ok(state)
}

fn subspace_containment(state: &RunState) -> Result<String, String> {
    let worst = state
        .record
        .tasks
        .iter()
        .map(|t| t.max_subspace_residual.unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    if worst < 1e-9 {
        Ok(format!("max residual {worst:.1e} over {} tasks", state.record.tasks.len()))
    } else {
        Err(format!("max residual {worst:.3e} ≥ 1e-9"))
    }
}

fn parameter_accounting(state: &RunState) -> Result<String, String> {
    let r_max = state.config.adapter.r_max;
    for layer in &state.record.parameters.layers {
        let basis = param_count(ParamKind::FloraSharedOnce, layer.d_input, layer.d_output, r_max);
        if layer.basis_params != basis {
            return Err(format!("{}: basis cost {} ≠ {basis}", layer.name, layer.basis_params));
        }
        for (t, (&cost, log)) in layer.task_params.iter().zip(&state.record.tasks).enumerate() {
            let r = log.rank.ok_or("missing rank")?;
            if cost != param_count(ParamKind::FloraPerTask, layer.d_input, layer.d_output, r) {
                return Err(format!("{} task {t}: cost {cost} ≠ 2·{r}²", layer.name));
            }
        }
    }
    Ok(format!("{} layers, exact", state.record.parameters.layers.len()))
}

fn history(state: &RunState) -> Result<String, String> {
    let reads = state.record.audit.past_task_reads();
    if reads != 0 {
        return Err(format!("{reads} reads of past-task training data"));
    }
    match state.record.tasks.iter().find(|t| !t.frozen_history_unchanged) {
        Some(t) => Err(format!("frozen state changed during task {}", t.task_id)),
        None => Ok("no past-task reads; frozen hashes stable".into()),
    }
}

fn argmax_invariance() -> Result<String, String> {
    let mut rng = Rng::new(0x5eed_0300);
    for _ in 0..100 {
        let weights: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let selector = RankSelector::with_weights(vec![2, 4, 8], weights, 1.0, 8).map_err(|e| e.to_string())?;
        let h = 0.01 + 5.0 * rng.uniform_open();
        let pick = |c: f64| {
            let est = ComplexityEstimate {
                task_id: 0,
                h_value: c * h,
                probe_steps: 0,
            };
            select_rank(&selector, &est, SelectionMode::Argmax, &mut Rng::new(0)).unwrap()
        };
        let base = pick(1.0);
        if let Some(c) = [0.1, 10.0, 100.0].into_iter().find(|&c| pick(c) != base) {
            return Err(format!("selection changed at scale {c} (H = {h})"));
        }
    }
    Ok("100 selectors, c ∈ {0.1, 1, 10, 100}".into())
}

fn checkpoint_round_trip(state: &RunState) -> Result<String, String> {
    let bytes = encode(state);
    let back = decode(&bytes).map_err(|e| e.to_string())?;
    if encode(&back) != bytes || &back != state {
        return Err("save → load → save changed the bytes".into());
    }
    Ok(format!("{} bytes, identical", bytes.len()))
}
