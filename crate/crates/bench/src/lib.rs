//! Deterministic inputs shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scorealign::experiments::{generate_score, render_performance};
use scorealign::{AudioBuffer, SyntheticSpec};

/// Uniform noise in [-1, 1].
pub fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn noise_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), noise(rows * cols, seed)).expect("shape matches length")
}

/// A rendered two-voice piece of the given length.
pub fn performance(duration_s: f64, seed: u64) -> (scorealign::Score, AudioBuffer) {
    let spec = SyntheticSpec {
        polyphony: 2,
        duration_s,
        seed,
        ..SyntheticSpec::default()
    };
    let score = generate_score(&spec).expect("valid spec");
    let perf = render_performance(&score, &spec).expect("renders");
    (score, perf.audio)
}
