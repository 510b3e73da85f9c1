//! Seed derivation.
//!
//! Every stochastic stage draws from its own ChaCha8 stream. Sub-seeds are
//! derived from a global seed and a stage name as
//! `splitmix64(seed ^ fnv1a64(stage))`, so adding a new stage never shifts
//! the streams of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the seed of a named stage from a parent seed.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    splitmix64(seed ^ fnv1a64(stage.as_bytes()))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
