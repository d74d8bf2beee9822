//! Seed derivation. Every random stream is keyed by an explicit tuple
//! (seed, purpose, step, index...), never by ambient state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::nn::Real;

pub type StreamRng = ChaCha8Rng;

/// Stream tags keep unrelated consumers of the same seed apart.
pub mod tag {
    pub const PHANTOM: u64 = 0x5048_414e;
    pub const SPLIT: u64 = 0x5350_4c54;
    pub const INIT: u64 = 0x494e_4954;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const STEP: u64 = 0x5354_4550;
    pub const SAMPLE: u64 = 0x534d_504c;
    pub const CODEBOOK: u64 = 0x434f_4445;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a key tuple into one 64-bit seed.
pub fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(parts: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

pub fn normal<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    let v: f64 = rng.sample(StandardNormal);
    T::cst(v)
}

pub fn normal_vec<T: Real, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Indices of the `batch` samples drawn at `step`.
///
/// Samples are visited epoch by epoch; each epoch is a fresh permutation
/// keyed by (seed, epoch), so any step can be reproduced in isolation.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    assert!(n > 0, "cannot draw batches from an empty set");
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch as u64 {
        let pos = step * batch as u64 + j;
        let epoch = pos / n as u64;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut stream(&[seed, tag::SHUFFLE, epoch]));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[(pos % n as u64) as usize]);
    }
    out
}
