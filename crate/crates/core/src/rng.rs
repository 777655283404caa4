//! Seed derivation. Every stochastic component draws from its own ChaCha
//! stream so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer, used to turn `(seed, tag)` pairs into independent seeds.
pub fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tag))
}

/// Tags for the distinct streams of one simulation.
pub mod tags {
    pub const GLOBAL_INIT: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const CLIENT_BATCHES: u64 = 0x100;
    pub const CLIENT_LOCAL_INIT: u64 = 0x200;
    pub const CLIENT_ADAPTOR_INIT: u64 = 0x300;
}
