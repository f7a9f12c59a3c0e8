//! Seed plumbing. Every random draw in the crate comes from a ChaCha8
//! stream derived from a user seed plus a fixed stream label, so separate
//! consumers never perturb one another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream labels. Values are part of the reproducibility contract.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SOURCE_BATCHES: u64 = 2;
    pub const BRIDGE_BATCHES: u64 = 3;
    pub const TARGET_BATCHES: u64 = 4;
    pub const MINE_SHUFFLE: u64 = 5;
    pub const DATA: u64 = 6;
    pub const FOLDS: u64 = 7;
    pub const PROJECTIONS: u64 = 8;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives an independent sub-seed, e.g. one per network in a bundle.
pub fn subseed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
