//! Seed derivation for independent, reproducible random streams.
//!
//! Every stochastic operation takes an explicit `u64` seed. Sub-streams are
//! derived by mixing a parent seed with a tag and an index, so the stream a
//! rollout sees depends only on its position, never on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `parent`, a stream tag and an index.
pub fn derive_seed(parent: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(parent) ^ tag) ^ index)
}

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags used across the crate.
pub mod tags {
    pub const WORLD: u64 = 0x0057_4F52_4C44;
    pub const EPOCH_SHUFFLE: u64 = 0x5348_5546;
    pub const ROLLOUT: u64 = 0x524F_4C4C;
    pub const TRAJECTORY: u64 = 0x5452_414A;
    pub const EVAL: u64 = 0x4556_414C;
    pub const BOOTSTRAP: u64 = 0x424F_4F54;
}
