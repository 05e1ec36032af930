//! Seeded generators. Every stochastic operation takes one of these.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as Rng64;

pub fn seeded(seed: u64) -> Rng64 {
    Rng64::seed_from_u64(seed)
}

/// Derive an independent stream from a base seed and a tag (SplitMix64 mix).
pub fn derive(seed: u64, tag: u64) -> Rng64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    Rng64::seed_from_u64(z)
}
