//! Shared fixtures for the benchmarks.

use dleng::synth::{clustered_embeddings, generate_scenario, ScenarioBundle, ScenarioSpec};
use dleng::EmbeddingRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row-major `n x c` log-likelihoods drawn uniformly from [-20, 0).
pub fn random_log_lik(n: usize, c: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * c).map(|_| rng.random_range(-20.0..0.0)).collect()
}

pub fn embeddings(n: usize) -> Vec<EmbeddingRecord> {
    clustered_embeddings(n, 64, 16, 0.6, 5).expect("valid embedding parameters")
}

pub fn small_scenario() -> ScenarioBundle {
    let spec = ScenarioSpec {
        name: "bench".into(),
        train_frames: 6,
        val_frames: 6,
        test_frames: 4,
        unknown_frames: 6,
        ..ScenarioSpec::default()
    };
    generate_scenario(&spec).expect("valid scenario")
}
