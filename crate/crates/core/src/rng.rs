//! Seeded random streams.
//!
//! Every generator is a xoshiro256++ seeded through splitmix64, owned by the
//! caller. Independent streams are derived by hashing a tuple of counters
//! (seed, purpose, index, ...) so that parallel work stays reproducible.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

/// Generator for a plain seed.
pub fn rng(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a tuple of counters into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Generator for the stream identified by `parts`.
pub fn stream(parts: &[u64]) -> Rng {
    rng(derive_seed(parts))
}
