use fmlora::harness::checkpoint::{decode, encode, CHECKPOINT_VERSION};
use fmlora::harness::{
    load_checkpoint, run_sequence, save_checkpoint, stream_for, AdapterChoice, CheckpointError, RunConfig,
    RunRecord, RunState, StreamKind,
};

/// A short configuration that still exercises probing, weight learning and
/// several task boundaries.
fn small(tasks: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.stream.num_tasks = tasks;
    c.stream.samples_per_class = 20;
    c.train.epochs = 3;
    c.drs.probe_steps = 8;
    c.drs.weight_steps = 2;
    c.dmp.m = 3;
    c
}

fn run(config: &RunConfig) -> RunRecord {
    run_sequence(&stream_for(config).unwrap(), config).unwrap()
}

#[test]
fn single_task_metrics_collapse_to_the_one_entry() {
    let r = run(&small(1));
    assert_eq!(r.accuracy.len(), 1);
    let a = r.accuracy[0][0];
    assert_eq!(r.acc(), Some(a));
    assert_eq!(r.aaa(), Some(a));
    assert_eq!(r.metrics.as_ref().unwrap().forgetting, 0.0);
}

#[test]
fn identical_seeds_give_identical_records() {
    let c = small(3);
    let a = run(&c).to_json();
    let b = run(&c).to_json();
    assert_eq!(a, b);
    let mut other = c.clone();
    other.seed = 1;
    assert_ne!(run(&other).to_json(), a);
}

#[test]
fn record_is_complete_and_well_formed() {
    let c = small(4);
    let r = run(&c);
    assert_eq!(r.accuracy.len(), 4);
    for (k, row) in r.accuracy.iter().enumerate() {
        assert_eq!(row.len(), k + 1);
        assert!(row.iter().all(|a| (0.0..=1.0).contains(a)));
    }
    assert_eq!(r.audit.past_task_reads(), 0);
    assert!(r.tasks.iter().all(|t| t.frozen_history_unchanged));
    assert!(r.tasks.iter().all(|t| t.rank.is_some() && t.complexity.is_some()));
    for t in &r.tasks {
        let res = t.max_subspace_residual.unwrap();
        assert!(res < 1e-9, "residual {res}");
    }
    for i in 0..4 {
        for j in 0..4 {
            let (x, y) = (r.interference[i][j], r.interference[j][i]);
            assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()));
        }
    }
    let back = RunRecord::from_json(&r.to_json()).unwrap();
    assert_eq!(back, r);
    assert!(r.accuracy_csv().lines().count() == 1 + 4 * 5 / 2);
}

#[test]
fn disabled_prompt_is_marked() {
    let mut c = small(2);
    c.dmp.m = 0;
    let r = run(&c);
    assert!(!r.dmp_enabled);
    assert_eq!(r.prompt_len, 0);
    assert!(run(&small(2)).dmp_enabled);
}

#[test]
fn fixed_rank_and_baselines() {
    let mut fixed = small(3);
    fixed.drs.enabled = false;
    fixed.adapter.fixed_rank = 2;
    let r = run(&fixed);
    assert!(r.tasks.iter().all(|t| t.rank == Some(2) && t.complexity.is_none()));
    let d = fixed.model.embed_dim;
    for layer in &r.parameters.layers {
        assert_eq!(layer.basis_params, 8 * (layer.d_input + layer.d_output));
        assert_eq!(layer.task_params, vec![8; 3]);
    }
    assert_eq!(r.parameters.layers[0].d_input, d);

    let mut lora = fixed.clone();
    lora.adapter.kind = AdapterChoice::PlainLora;
    let r = run(&lora);
    for layer in &r.parameters.layers {
        assert_eq!(layer.basis_params, 0);
        assert_eq!(layer.task_params, vec![2 * (layer.d_input + layer.d_output); 3]);
    }

    let mut overwrite = small(3);
    overwrite.adapter.kind = AdapterChoice::Overwrite;
    let r = run(&overwrite);
    assert!(r.tasks.iter().all(|t| t.rank.is_none()));
    assert_eq!(r.audit.past_task_reads(), 0);
}

#[test]
fn domain_incremental_stream_runs() {
    let mut c = small(3);
    c.stream.kind = StreamKind::DomainIncremental;
    let r = run(&c);
    assert_eq!(r.stream_kind, StreamKind::DomainIncremental);
    assert!(r.tasks.iter().all(|t| t.classes == r.tasks[0].classes));
    assert!(r.acc().unwrap() > 1.0 / c.stream.num_classes as f64);
}

#[test]
fn resume_from_each_boundary_matches_a_straight_run() {
    let c = small(4);
    let stream = stream_for(&c).unwrap();
    let straight = run_sequence(&stream, &c).unwrap().to_json();
    let dir = tempfile::tempdir().unwrap();
    for stop in 0..=4 {
        let mut state = RunState::new(&c, &stream).unwrap();
        for _ in 0..stop {
            state.run_next_task(&stream).unwrap();
        }
        let path = dir.path().join(format!("k{stop}.ckpt"));
        save_checkpoint(&state, &path).unwrap();
        drop(state);
        let mut resumed = load_checkpoint(&path).unwrap();
        assert_eq!(resumed.tasks_completed, stop);
        let stream = stream_for(&resumed.config).unwrap();
        while !resumed.is_complete() {
            resumed.run_next_task(&stream).unwrap();
        }
        assert_eq!(resumed.into_record().unwrap().to_json(), straight, "resume at {stop}");
    }
}

fn checkpoint_bytes() -> Vec<u8> {
    let c = small(2);
    let stream = stream_for(&c).unwrap();
    let mut state = RunState::new(&c, &stream).unwrap();
    state.run_next_task(&stream).unwrap();
    encode(&state)
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let bytes = checkpoint_bytes();
    let state = decode(&bytes).unwrap();
    assert_eq!(encode(&state), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let again = load_checkpoint(&path).unwrap();
    assert_eq!(again, state);
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn damaged_checkpoints_are_reported_distinctly() {
    let bytes = checkpoint_bytes();

    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(decode(&flipped), Err(CheckpointError::ChecksumMismatch)));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode(&magic), Err(CheckpointError::BadMagic)));

    let mut version = bytes.clone();
    version[8] = CHECKPOINT_VERSION + 1;
    assert!(matches!(
        decode(&version),
        Err(CheckpointError::VersionMismatch { found, expected })
            if found == CHECKPOINT_VERSION + 1 && expected == CHECKPOINT_VERSION
    ));

    for cut in [3, 12, 40, bytes.len() - 1] {
        assert!(
            matches!(decode(&bytes[..cut]), Err(CheckpointError::Truncated)),
            "cut at {cut}"
        );
    }

    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_checkpoint(&dir.path().join("missing")),
        Err(CheckpointError::Io(_))
    ));
}

#[test]
fn finished_runs_refuse_more_tasks() {
    let c = small(1);
    let stream = stream_for(&c).unwrap();
    let mut state = RunState::new(&c, &stream).unwrap();
    state.run_next_task(&stream).unwrap();
    assert!(state.is_complete());
    assert!(state.run_next_task(&stream).is_err());

    let mut mismatched = c.clone();
    mismatched.stream.num_tasks = 2;
    assert!(RunState::new(&mismatched, &stream).is_err());
}
