//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a base seed and a list of stream coordinates, so parallel or
//! reordered work never changes what any single stream produces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    stream.iter().fold(mix(base), |acc, &s| mix(acc ^ mix(s)))
}

pub fn stream(base: u64, coords: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, coords))
}

/// Named stream tags keep unrelated consumers of the same seed apart.
pub mod tag {
    pub const CORPUS: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const POOL: u64 = 3;
    pub const INIT: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const MASK: u64 = 6;
    pub const PSEUDO: u64 = 7;
    pub const DECODE: u64 = 8;
    pub const EVAL: u64 = 9;
    pub const NOISE: u64 = 10;
    pub const BALD: u64 = 11;
    pub const VERIFY: u64 = 12;
}
