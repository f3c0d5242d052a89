//! Shared fixtures for the benchmarks.

use keyformer_core::data::{extract_features, generate_synthetic, FeatureSequence};
use keyformer_core::model::{ModelConfig, ModelWeights};
use keyformer_core::RngState;

/// Desk-size weights and `n` synthetic sequences, both from `seed`.
pub fn desk_fixture(n: usize, seed: u64) -> (ModelWeights<f32>, Vec<FeatureSequence>) {
    let cfg = ModelConfig::desk();
    let weights = ModelWeights::init(&cfg, &mut RngState::new(seed)).expect("valid config");
    let data = generate_synthetic(n.max(1), 1, 70, &mut RngState::new(seed + 1)).expect("synthetic data");
    let seqs = data
        .sessions
        .iter()
        .take(n)
        .map(|s| extract_features(s, cfg.seq_len).expect("features"))
        .collect();
    (weights, seqs)
}

/// `n` genuine and `m` impostor scores, roughly overlapping.
pub fn score_fixture(n: usize, m: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = RngState::new(seed);
    let genuine = (0..n).map(|_| rng.normal() * 0.1 + 0.3).collect();
    let impostor = (0..m).map(|_| rng.normal() * 0.1 + 0.5).collect();
    (genuine, impostor)
}
