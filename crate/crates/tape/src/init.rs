use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Glorot/Xavier uniform: entries in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`,
/// with `fan_in = rows` and `fan_out = cols`.
pub fn xavier_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    assert!(rows > 0 && cols > 0, "xavier_uniform needs positive dims");
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-a..=a))
}

pub fn xavier_uniform_seeded(rows: usize, cols: usize, seed: u64) -> Tensor {
    xavier_uniform(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed))
}
