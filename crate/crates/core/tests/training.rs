use keyformer_core::data::{extract_features, generate_synthetic, group_by_subject, FeatureSequence, SubjectSessions};
use keyformer_core::model::{ModelConfig, ModelWeights};
use keyformer_core::train::{
    adam_step, sample_triplets, train, AdamConfig, AdamState, Checkpoint, TrainConfig, TrainOptions,
};
use keyformer_core::{Error, RngState, Tensor};

fn dummy_subjects(n: usize, sessions: usize) -> Vec<SubjectSessions> {
    (0..n)
        .map(|i| SubjectSessions {
            subject_id: format!("u{i}"),
            sessions: (0..sessions)
                .map(|k| FeatureSequence {
                    subject_id: format!("u{i}"),
                    session_id: k.to_string(),
                    values: vec![0.0; 5],
                    seq_len: 1,
                    true_length: 1,
                })
                .collect(),
        })
        .collect()
}

#[test]
fn anchor_subjects_are_uniform() {
    let subjects = dummy_subjects(10, 4);
    let mut rng = RngState::new(42);
    let batch = sample_triplets(&subjects, 10_000, &mut rng).unwrap();
    let mut counts = [0usize; 10];
    for a in &batch.anchors {
        let i: usize = a.subject_id[1..].parse().unwrap();
        counts[i] += 1;
    }
    for (i, c) in counts.iter().enumerate() {
        assert!((850..=1150).contains(c), "subject {i} anchored {c} times");
    }
    for k in 0..batch.len() {
        assert_eq!(batch.anchors[k].subject_id, batch.positives[k].subject_id);
        assert_ne!(batch.anchors[k].session_id, batch.positives[k].session_id);
        assert_ne!(batch.anchors[k].subject_id, batch.negatives[k].subject_id);
    }
}

/// Scalar Adam written out from the update rule.
fn adam_oracle(theta0: f64, grad: impl Fn(f64) -> f64, steps: usize, c: &AdamConfig) -> f64 {
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    for t in 1..=steps {
        let g = grad(theta);
        m = c.beta1 * m + (1.0 - c.beta1) * g;
        v = c.beta2 * v + (1.0 - c.beta2) * g * g;
        let mh = m / (1.0 - c.beta1.powi(t as i32));
        let vh = v / (1.0 - c.beta2.powi(t as i32));
        theta -= c.learning_rate * mh / (vh.sqrt() + c.epsilon);
    }
    theta
}

#[test]
fn adam_first_step_is_learning_rate_sized() {
    let cfg = AdamConfig::default();
    let mut params = vec![Tensor::vector(vec![0.5f64, -2.0, 3.0])];
    let grads = vec![Tensor::vector(vec![0.2, -7.0, 1e-3])];
    let mut state = AdamState::new(&params);
    adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
    let moved: Vec<f64> = params[0].data().iter().zip([0.5, -2.0, 3.0]).map(|(a, b)| b - a).collect();
    for (d, g) in moved.iter().zip([0.2f64, -7.0, 1e-3]) {
        let want = cfg.learning_rate * g.signum() * g.abs() / (g.abs() + cfg.epsilon);
        assert!((d - want).abs() < 1e-12, "{d} vs {want}");
    }
    assert_eq!(state.step, 1);
}

#[test]
fn adam_matches_scalar_oracle_on_a_quadratic() {
    let cfg = AdamConfig {
        learning_rate: 0.05,
        ..AdamConfig::default()
    };
    let mut params = vec![Tensor::vector(vec![1.0f64])];
    let mut state = AdamState::new(&params);
    for _ in 0..200 {
        let g = vec![Tensor::vector(vec![2.0 * params[0].data()[0]])];
        adam_step(&mut params, &g, &mut state, &cfg).unwrap();
    }
    let want = adam_oracle(1.0, |t| 2.0 * t, 200, &cfg);
    assert!((params[0].data()[0] - want).abs() < 1e-12);
    assert!(want.abs() < 0.1, "oracle did not converge: {want}");
}

fn tiny_data(subjects: usize, seed: u64) -> Vec<SubjectSessions> {
    let cfg = ModelConfig::tiny();
    let data = generate_synthetic(subjects, 7, 12, &mut RngState::new(seed)).unwrap();
    let seqs = data.sessions.iter().map(|s| extract_features(s, cfg.seq_len).unwrap()).collect();
    group_by_subject(seqs)
}

fn tiny_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batches_per_epoch: 2,
        batch_size: 6,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn sample_checkpoint() -> Checkpoint {
    let model = ModelConfig::tiny();
    let all = tiny_data(8, 1);
    train(&model, &tiny_train_config(1), &all[..5], &all[5..], &TrainOptions::default())
        .unwrap()
        .last
}

#[test]
fn zero_epochs_returns_the_initialisation() {
    let model = ModelConfig::tiny();
    let all = tiny_data(6, 1);
    let out = train(&model, &tiny_train_config(0), &all[..4], &all[4..], &TrainOptions::default()).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.best.epoch, 0);
    assert_eq!(out.best.weights, out.last.weights);
    let again = train(&model, &tiny_train_config(0), &all[..4], &all[4..], &TrainOptions::default()).unwrap();
    assert_eq!(out.best.weights, again.best.weights);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let model = ModelConfig::tiny();
    let all = tiny_data(8, 2);
    let (tr, val) = (&all[..5], &all[5..]);
    let straight = train(&model, &tiny_train_config(3), tr, val, &TrainOptions::default()).unwrap();
    let first = train(&model, &tiny_train_config(1), tr, val, &TrainOptions::default()).unwrap();
    let bytes = first.last.to_bytes().unwrap();
    let opts = TrainOptions {
        resume: Some(Checkpoint::from_bytes(&bytes).unwrap()),
        ..TrainOptions::default()
    };
    let rest = train(&model, &tiny_train_config(3), tr, val, &opts).unwrap();
    assert_eq!(rest.last.weights, straight.last.weights);
    assert_eq!(rest.last.adam, straight.last.adam);
    let losses = |l: &[keyformer_core::train::EpochLog]| l.iter().map(|e| e.mean_loss.to_bits()).collect::<Vec<_>>();
    let mut joined = losses(&first.log);
    joined.extend(losses(&rest.log));
    assert_eq!(joined, losses(&straight.log));
}

#[test]
fn training_writes_log_and_best_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let model = ModelConfig::tiny();
    let all = tiny_data(8, 3);
    let opts = TrainOptions {
        checkpoint_path: Some(dir.path().join("m.ckpt")),
        log_path: Some(dir.path().join("log.jsonl")),
        resume: None,
    };
    let out = train(&model, &tiny_train_config(2), &all[..5], &all[5..], &opts).unwrap();
    let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let saved = Checkpoint::load(&dir.path().join("m.ckpt")).unwrap();
    assert_eq!(saved, out.best);
    let best = out.log.iter().map(|e| e.val_eer).fold(f64::INFINITY, f64::min);
    assert_eq!(saved.best_val_eer, Some(best));
    assert!(saved.global_threshold.is_some());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cp = sample_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.ckpt");
    cp.save(&p).unwrap();
    let back = Checkpoint::load(&p).unwrap();
    assert_eq!(back, cp);
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&p).unwrap());
    assert_eq!(back.digest().unwrap(), cp.digest().unwrap());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = sample_checkpoint().to_bytes().unwrap();
    for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    match Checkpoint::from_bytes(&flipped) {
        Err(Error::Checkpoint(m)) => assert!(m.contains("checksum"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn config_mismatch_names_both_configs() {
    let cp = sample_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.ckpt");
    cp.save(&p).unwrap();
    let other = ModelConfig {
        d_model: 4,
        ..ModelConfig::tiny()
    };
    match Checkpoint::load_expecting(&p, &other) {
        Err(Error::Checkpoint(m)) => assert!(m.contains("expected") && m.contains("found"), "{m}"),
        other => panic!("{other:?}"),
    }
    assert!(Checkpoint::load_expecting(&p, &ModelConfig::tiny()).is_ok());
}

#[test]
fn weights_from_another_config_do_not_load() {
    let tiny = ModelWeights::<f32>::init(&ModelConfig::tiny(), &mut RngState::new(0)).unwrap();
    let desk = ModelConfig::desk();
    assert!(ModelWeights::from_tensors(&desk, tiny.tensors().to_vec()).is_err());
}
