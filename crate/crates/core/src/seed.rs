//! Counter-based seed derivation.
//!
//! `split(base, k)` passes `base + (k + 1) * φ` through the SplitMix64
//! finalizer, where φ = 0x9E37_79B9_7F4A_7C15. Trial `k` of an experiment
//! always receives `split(base, k)` no matter how many trials run, and
//! independent streams (features, noise, first-layer directions, Monte
//! Carlo samples, ...) are separated by tagging: `split(split(base, TAG), k)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn split(base: u64, k: u64) -> u64 {
    mix64(base.wrapping_add(GOLDEN.wrapping_mul(k.wrapping_add(1))))
}

/// Stream tags used throughout the crate.
pub mod stream {
    pub const FEATURES: u64 = 0x0046_4541_5455_5245;
    pub const NOISE: u64 = 0x004E_4F49_5345;
    pub const DIRECTIONS: u64 = 0x0044_4952_4543;
    pub const TARGET: u64 = 0x0054_4152_4745_54;
    pub const MONTE_CARLO: u64 = 0x004D_4F4E_5445;
    pub const PAIRS: u64 = 0x0050_4149_5253;
    pub const SKETCH: u64 = 0x0053_4B45_5443_48;
    pub const CALIBRATION: u64 = 0x0043_414C_4942;
}

pub fn tagged(base: u64, tag: u64) -> u64 {
    split(base, tag)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_prefix_stable_and_distinct() {
        let a: Vec<u64> = (0..10).map(|k| split(42, k)).collect();
        let b: Vec<u64> = (0..20).map(|k| split(42, k)).collect();
        assert_eq!(a[..], b[..10]);
        let mut sorted = b.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 20);
        assert_ne!(split(1, 0), split(2, 0));
    }
}
