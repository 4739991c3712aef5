//! Seed derivation and the stream generator used everywhere randomness appears.
//!
//! Streams are ChaCha8 seeded from 64-bit values; child seeds are produced by
//! SplitMix64 finalization of `(parent, stream index)`, so any scene or run can
//! be regenerated from the master seed alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Recorded in every artifact that depends on generated randomness.
pub const PRNG_NAME: &str = "chacha8/splitmix64-v1";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `index` under `parent`.
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn stream(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
