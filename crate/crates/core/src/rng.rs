//! Seed derivation. Every random draw in the crate comes from a ChaCha stream
//! keyed by a master seed and a path of indices, so replicates are
//! reproducible and independent of scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags for the draws that make up one replicate.
pub mod stream {
    pub const BETA_STAR: u64 = 0;
    pub const LABELED: u64 = 1;
    pub const UNLABELED: u64 = 2;
    pub const TEST: u64 = 3;
    pub const FRAMES: u64 = 4;
    pub const VALIDATION: u64 = 5;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Folds `path` into `master`. Distinct paths give unrelated seeds.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, &idx| {
        splitmix64(acc ^ splitmix64(idx.wrapping_add(0x632B_E59B_D9B4_E019)))
    })
}

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
