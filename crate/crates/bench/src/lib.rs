//! Shared inputs for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparse_transformer::attention::{AttentionParams, HeadShape};
use sparse_transformer::Tensor;

pub fn uniform(shape: &[usize], scale: f32, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

pub fn attention_params(d: usize, n_h: usize, seed: u64) -> AttentionParams<f32> {
    let shape = HeadShape::new(d, n_h, false).expect("d divisible by n_h");
    let s = (3.0 / d as f32).sqrt();
    AttentionParams {
        shape,
        wq: uniform(&[d, d], s, seed),
        wk: uniform(&[d, d], s, seed + 1),
        wv: uniform(&[d, d], s, seed + 2),
        wp: uniform(&[d, d], s, seed + 3),
    }
}
