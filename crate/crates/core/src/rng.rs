//! Seeded randomness.
//!
//! Every stochastic choice in the crate flows from a single master seed.
//! Independent streams (per scene, per training step, per probe) are derived
//! with a splitmix64 hop so that parallel and sequential execution see the
//! same per-item seeds.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby seed values.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed for stream `index` of `label` under `master`.
pub fn derive_seed(master: u64, label: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ label.rotate_left(17)).wrapping_add(index))
}

/// Deterministic RNG stream.
pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform sample without replacement of `k` indices from `0..n`.
pub fn sample_without_replacement(rng: &mut Stream, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n);
    let mut idx: Vec<usize> = (0..n).collect();
    // partial Fisher-Yates: first k entries form the sample
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}
