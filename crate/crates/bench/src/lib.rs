//! Shared fixtures for the criterion benchmarks.

use eventrl_core::trpo::SurrogateBatch;
use eventrl_core::{MlpParams, NetworkShape, Result, SimRng};
use rand::{Rng, SeedableRng};

pub fn rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

pub fn random_rows(rng: &mut SimRng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// A policy of the given shape and a surrogate batch of `n` random samples.
pub fn surrogate_fixture(shape: NetworkShape, n: usize, seed: u64) -> Result<(MlpParams, SurrogateBatch)> {
    let mut rng = rng(seed);
    let policy = MlpParams::init(shape.clone(), &mut rng);
    let obs = random_rows(&mut rng, n, shape.input_dim);
    let actions = (0..n).map(|_| rng.random_range(0..shape.output_dim)).collect();
    let advantages = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let durations = (0..n).map(|_| rng.random_range(0.1..5.0)).collect();
    let batch = SurrogateBatch::new(&policy, obs, actions, advantages, durations)?;
    Ok((policy, batch))
}
