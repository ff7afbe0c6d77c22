//! Seed derivation helpers.
//!
//! All stochastic components run on `ChaCha8Rng` streams derived from a
//! single root seed, so identical configurations replay bit-identically and
//! independent subsystems (synthesis, detectors, training) do not perturb
//! each other's draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates nearby seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent sub-seed from `(root, tag)`.
pub fn derive_seed(root: u64, tag: u64) -> u64 {
    splitmix64(root ^ splitmix64(tag))
}

/// A `ChaCha8Rng` seeded from `(root, tag)`.
pub fn derive_rng(root: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag))
}
