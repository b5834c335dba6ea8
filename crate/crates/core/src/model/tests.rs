use super::*;
use crate::dmp::grad_prompt;
use crate::numerics::{frobenius_inner, Rng};

fn small_config(d: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: d,
        num_heads: heads,
        num_layers: 1,
        mlp_hidden: 2 * d,
        max_seq_len: 6,
    }
}

struct Fixture {
    model: TinyTransformer<f64>,
    prompt: MetaPrompt<f64>,
    inputs: Vec<Matrix<f64>>,
    labels: Vec<usize>,
}

fn fixture(d: usize, heads: usize, m: usize, seed: u64) -> Fixture {
    let mut rng = Rng::new(seed);
    let kind = AdapterKind::Flora {
        r_max: 4,
        orthonormal: true,
    };
    let mut model = TinyTransformer::new(small_config(d, heads), &[3, 2], kind, &mut rng).unwrap();
    model.set_visible_blocks(1);
    model.begin_task(0, 3, &mut rng).unwrap();
    let mut prompt = MetaPrompt::new(m, d, &mut rng);
    // Non-zero N so every factor receives gradient.
    for layer in 0..model.num_adapted_layers() {
        let key = ParamKey::Coeff {
            layer,
            factor: Factor::Second,
        };
        let n = model.param_mut(&mut prompt, key).unwrap();
        for x in n.as_mut_slice() {
            *x = 0.3 * rng.normal();
        }
    }
    let prompt = MetaPrompt::from_tokens(prompt.tokens().scaled(20.0));
    let inputs = (0..3)
        .map(|_| Matrix::from_fn(4, d, |_, _| rng.normal()))
        .collect();
    Fixture {
        model,
        prompt,
        inputs,
        labels: vec![0, 2, 1],
    }
}

fn refs(v: &[Matrix<f64>]) -> Vec<&Matrix<f64>> {
    v.iter().collect()
}

fn loss_of(model: &TinyTransformer<f64>, prompt: &MetaPrompt<f64>, f: &Fixture) -> f64 {
    let logits = model.predict(prompt, &refs(&f.inputs)).unwrap();
    cross_entropy(&logits, &f.labels).0
}

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-5 * analytic.abs().max(numeric.abs()) + 1e-8
}

#[test]
fn whole_model_gradients_match_central_differences() {
    let f = fixture(8, 2, 2, 11);
    let (_, grads) = loss_and_gradients(&f.model, &f.prompt, &refs(&f.inputs), &f.labels).unwrap();
    let keys = grads.keys();
    assert!(keys.contains(&ParamKey::Prompt));
    assert!(keys.contains(&ParamKey::Head { block: 0 }));
    assert!(keys.iter().any(|k| matches!(k, ParamKey::Basis { .. })));
    assert!(!keys.iter().any(|k| matches!(k, ParamKey::Base { .. })));
    let h = 1e-5;
    for (key, g) in grads.iter() {
        for idx in 0..g.as_slice().len() {
            let mut plus_model = f.model.clone();
            let mut plus_prompt = f.prompt.clone();
            plus_model.param_mut(&mut plus_prompt, key).unwrap().as_mut_slice()[idx] += h;
            let mut minus_model = f.model.clone();
            let mut minus_prompt = f.prompt.clone();
            minus_model.param_mut(&mut minus_prompt, key).unwrap().as_mut_slice()[idx] -= h;
            let numeric =
                (loss_of(&plus_model, &plus_prompt, &f) - loss_of(&minus_model, &minus_prompt, &f)) / (2.0 * h);
            let analytic = g.as_slice()[idx];
            assert!(close(analytic, numeric), "{key:?}[{idx}]: {analytic} vs {numeric}");
        }
    }
}

#[test]
fn prompt_gradient_from_hidden_outputs_matches_central_differences() {
    let f = fixture(4, 2, 2, 12);
    let mut rng = Rng::new(99);
    let upstream: Vec<Matrix<f64>> = (0..3).map(|_| Matrix::from_fn(6, 4, |_, _| rng.normal())).collect();
    let objective = |prompt: &MetaPrompt<f64>| {
        let (_, tape) = f.model.forward(prompt, &refs(&f.inputs)).unwrap();
        tape.hidden_outputs()
            .iter()
            .zip(&upstream)
            .map(|(h, c)| frobenius_inner(h, c).unwrap())
            .sum::<f64>()
    };
    let (_, mut tape) = f.model.forward(&f.prompt, &refs(&f.inputs)).unwrap();
    let g = grad_prompt(&f.model, &mut tape, &upstream).unwrap();
    assert_eq!(g.shape(), (2, 4));
    let h = 1e-5;
    for idx in 0..8 {
        let mut p = f.prompt.clone();
        p.tokens_mut().as_mut_slice()[idx] += h;
        let mut q = f.prompt.clone();
        q.tokens_mut().as_mut_slice()[idx] -= h;
        let numeric = (objective(&p) - objective(&q)) / (2.0 * h);
        assert!(close(g.as_slice()[idx], numeric), "{idx}: {} vs {numeric}", g.as_slice()[idx]);
    }
}

#[test]
fn masked_prompt_receives_zero_gradient_and_changes_nothing() {
    let mut f = fixture(8, 2, 3, 13);
    f.model.set_mask_prompt_keys(true);
    let (_, grads) = loss_and_gradients(&f.model, &f.prompt, &refs(&f.inputs), &f.labels).unwrap();
    assert_eq!(grads.get(ParamKey::Prompt).unwrap().max_abs(), 0.0);

    let with = f.model.predict(&f.prompt, &refs(&f.inputs)).unwrap();
    let without = f.model.predict(&MetaPrompt::disabled(8), &refs(&f.inputs)).unwrap();
    assert!(with.sub(&without).unwrap().max_abs() < 1e-14);
}

#[test]
fn disabled_prompt_produces_no_prompt_gradient() {
    let f = fixture(8, 2, 0, 14);
    let (_, grads) = loss_and_gradients(&f.model, &f.prompt, &refs(&f.inputs), &f.labels).unwrap();
    assert!(grads.get(ParamKey::Prompt).is_none());
}

#[test]
fn batch_permutation_permutes_logits_and_keeps_gradients() {
    let f = fixture(8, 2, 2, 15);
    let order = [2usize, 0, 1];
    let permuted: Vec<Matrix<f64>> = order.iter().map(|&i| f.inputs[i].clone()).collect();
    let labels: Vec<usize> = order.iter().map(|&i| f.labels[i]).collect();
    let a = f.model.predict(&f.prompt, &refs(&f.inputs)).unwrap();
    let b = f.model.predict(&f.prompt, &refs(&permuted)).unwrap();
    for (row, &src) in order.iter().enumerate() {
        assert_eq!(b.row(row), a.row(src));
    }
    let (_, ga) = loss_and_gradients(&f.model, &f.prompt, &refs(&f.inputs), &f.labels).unwrap();
    let (_, gb) = loss_and_gradients(&f.model, &f.prompt, &refs(&permuted), &labels).unwrap();
    for (key, g) in ga.iter() {
        assert!(g.sub(gb.get(key).unwrap()).unwrap().max_abs() < 1e-12);
    }
}

#[test]
fn tape_cannot_be_reused() {
    let f = fixture(8, 2, 2, 16);
    let (logits, mut tape) = f.model.forward(&f.prompt, &refs(&f.inputs)).unwrap();
    let (_, dl) = cross_entropy(&logits, &f.labels);
    f.model.backward(&mut tape, &dl).unwrap();
    assert!(tape.is_consumed());
    assert!(matches!(f.model.backward(&mut tape, &dl), Err(ModelError::TapeConsumed)));
}

#[test]
fn doubling_upstream_doubles_every_gradient() {
    let f = fixture(8, 2, 2, 17);
    let (logits, mut t1) = f.model.forward(&f.prompt, &refs(&f.inputs)).unwrap();
    let (_, dl) = cross_entropy(&logits, &f.labels);
    let g1 = f.model.backward(&mut t1, &dl).unwrap();
    let (_, mut t2) = f.model.forward(&f.prompt, &refs(&f.inputs)).unwrap();
    let g2 = f.model.backward(&mut t2, &dl.scaled(2.0)).unwrap();
    for (key, g) in g1.iter() {
        let diff = g.scaled(2.0).sub(g2.get(key).unwrap()).unwrap().max_abs();
        assert!(diff <= 1e-12 * g.max_abs().max(1.0));
    }
}

#[test]
fn construction_and_training_are_deterministic() {
    let run = || {
        let mut f = fixture(8, 2, 2, 18);
        let mut opt = AdamW::new(OptimizerConfig::default(), Schedule::Constant);
        for _ in 0..3 {
            train_step(&mut f.model, &mut f.prompt, &refs(&f.inputs), &f.labels, &mut opt).unwrap();
        }
        f.model.predict(&f.prompt, &refs(&f.inputs)).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn training_leaves_base_weights_untouched() {
    let mut f = fixture(8, 2, 2, 19);
    let before = f.model.base_weight_bytes();
    let mut opt = AdamW::new(OptimizerConfig { lr: 1e-2, ..Default::default() }, Schedule::Constant);
    for _ in 0..5 {
        train_step(&mut f.model, &mut f.prompt, &refs(&f.inputs), &f.labels, &mut opt).unwrap();
    }
    assert_eq!(before, f.model.base_weight_bytes());
    assert!(matches!(
        f.model.param_mut(&mut f.prompt, ParamKey::Base { layer: 0 }),
        Err(ModelError::Frozen(_))
    ));
}

#[test]
fn attention_rows_are_distributions() {
    let f = fixture(8, 2, 2, 20);
    let (_, tape) = f.model.forward(&f.prompt, &refs(&f.inputs)).unwrap();
    let mut count = 0;
    for p in tape.attention_probs() {
        for i in 0..p.rows() {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p.row(i).iter().all(|&x| x >= 0.0));
        }
        count += 1;
    }
    assert_eq!(count, 3 * 2);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut f = fixture(8, 2, 2, 21);
    let model = f.model.clone();
    let prompt = f.prompt.clone();
    let mut opt = AdamW::new(OptimizerConfig { lr: 0.0, ..Default::default() }, Schedule::Constant);
    train_step(&mut f.model, &mut f.prompt, &refs(&f.inputs), &f.labels, &mut opt).unwrap();
    assert_eq!(model, f.model);
    assert_eq!(prompt, f.prompt);
}

#[test]
fn loss_decreases_on_a_separable_batch() {
    let mut rng = Rng::new(22);
    let d = 8;
    let kind = AdapterKind::Flora {
        r_max: 4,
        orthonormal: true,
    };
    let mut model = TinyTransformer::new(small_config(d, 2), &[2], kind, &mut rng).unwrap();
    model.set_visible_blocks(1);
    model.begin_task(0, 4, &mut rng).unwrap();
    let mut prompt = MetaPrompt::new(2, d, &mut rng);
    let mean: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..16 {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        inputs.push(Matrix::from_fn(4, d, |_, j| sign * mean[j] + 0.5 * rng.normal()));
        labels.push(i % 2);
    }
    let x = refs(&inputs);
    let mut opt = AdamW::new(OptimizerConfig { lr: 1e-2, ..Default::default() }, Schedule::Cosine { total_steps: 50 });
    let first = train_step(&mut model, &mut prompt, &x, &labels, &mut opt).unwrap();
    for _ in 0..49 {
        train_step(&mut model, &mut prompt, &x, &labels, &mut opt).unwrap();
    }
    let (acc, last) = evaluate(&model, &prompt, &x, &labels).unwrap();
    assert!(last < 0.5 * first, "{first} -> {last}");
    assert_eq!(acc, 1.0);
}

#[test]
fn checkpoint_bytes_round_trip() {
    let mut f = fixture(8, 2, 2, 23);
    f.model.end_task().unwrap();
    f.model.freeze_head_block(0);
    let mut bytes = Vec::new();
    f.model.write_to(&mut bytes).unwrap();
    let back = TinyTransformer::<f64>::read_from(&mut bytes.as_slice()).unwrap();
    assert_eq!(back, f.model);
    assert!(TinyTransformer::<f64>::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn labels_outside_visible_classes_are_rejected() {
    let f = fixture(8, 2, 2, 24);
    let err = loss_and_gradients(&f.model, &f.prompt, &refs(&f.inputs), &[0, 3, 1]).unwrap_err();
    assert!(matches!(err, ModelError::LabelOutOfRange { label: 3, classes: 3 }));
}

#[test]
fn frozen_head_block_gets_no_gradient() {
    let mut f = fixture(8, 2, 2, 25);
    f.model.freeze_head_block(0);
    let (_, grads) = loss_and_gradients(&f.model, &f.prompt, &refs(&f.inputs), &f.labels).unwrap();
    assert!(grads.get(ParamKey::Head { block: 0 }).is_none());
}

#[test]
fn plain_lora_and_dense_gradients_match_central_differences() {
    for kind in [AdapterKind::PlainLora, AdapterKind::Dense] {
        let mut rng = Rng::new(26);
        let mut model = TinyTransformer::new(small_config(4, 2), &[2], kind, &mut rng).unwrap();
        model.set_visible_blocks(1);
        model.begin_task(0, 2, &mut rng).unwrap();
        let mut prompt = MetaPrompt::disabled(4);
        for layer in 0..model.num_adapted_layers() {
            let key = match kind {
                AdapterKind::PlainLora => ParamKey::Lora { layer, factor: Factor::Second },
                _ => ParamKey::Dense { layer },
            };
            for x in model.param_mut(&mut prompt, key).unwrap().as_mut_slice() {
                *x = 0.2 * rng.normal();
            }
        }
        let f = Fixture {
            model,
            prompt,
            inputs: (0..2).map(|_| Matrix::from_fn(3, 4, |_, _| rng.normal())).collect(),
            labels: vec![1, 0],
        };
        let (_, grads) = loss_and_gradients(&f.model, &f.prompt, &refs(&f.inputs), &f.labels).unwrap();
        let h = 1e-5;
        for (key, g) in grads.iter() {
            for idx in 0..g.as_slice().len() {
                let mut pm = f.model.clone();
                let mut pp = f.prompt.clone();
                pm.param_mut(&mut pp, key).unwrap().as_mut_slice()[idx] += h;
                let mut mm = f.model.clone();
                let mut mp = f.prompt.clone();
                mm.param_mut(&mut mp, key).unwrap().as_mut_slice()[idx] -= h;
                let numeric = (loss_of(&pm, &pp, &f) - loss_of(&mm, &mp, &f)) / (2.0 * h);
                assert!(close(g.as_slice()[idx], numeric), "{kind:?} {key:?}[{idx}]");
            }
        }
    }
}
