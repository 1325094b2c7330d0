//! Counter-based seeding.
//!
//! Every random stream in the crate is derived from a tuple of integers
//! (seed, purpose, index, ...) so that the stream for, say, dropout at
//! layer 7 on step 312 does not depend on how many draws any other
//! component has made before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes. Keeps different consumers of the same seed apart.
pub mod stream {
    pub const INIT: u64 = 0x1;
    pub const DROPOUT: u64 = 0x2;
    pub const SHUFFLE: u64 = 0x3;
    pub const SIGNATURE: u64 = 0x10;
    pub const DISTRACTOR: u64 = 0x11;
    pub const SAMPLE: u64 = 0x12;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key tuple into one 64-bit seed.
pub fn mix(key: &[u64]) -> u64 {
    key.iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn keyed(key: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(key))
}
