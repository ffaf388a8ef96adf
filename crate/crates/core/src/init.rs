//! Deterministic parameter initialization.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Seeded generator used for every initializer in the crate.
pub type InitRng = ChaCha8Rng;

pub fn rng(seed: u64) -> InitRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut InitRng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform(rng: &mut InitRng, shape: &[usize], fan_in: usize) -> Tensor {
    uniform(rng, shape, 1.0 / libm::sqrt(fan_in.max(1) as f64))
}
