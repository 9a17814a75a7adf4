//! Seeded inputs shared by the kernel benchmarks.

use rand::Rng;
use vamkit::{AttentionMap, Shape, StreamKey, Tensor};

pub fn uniform_tensor(shape: Shape, lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut rng = StreamKey::root(seed).rng();
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

pub fn attention_map(shape: Shape, seed: u64) -> AttentionMap {
    AttentionMap::new(uniform_tensor(shape, 0.0, 1.0, seed)).expect("values in [0, 1)")
}
