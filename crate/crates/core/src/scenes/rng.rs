//! Seed derivation for reproducible generation.
//!
//! All randomness comes from ChaCha8 streams. A stream's 64-bit seed is
//! derived from the master seed and a path of labels with SplitMix64, so
//! item `i` of a dataset gets the same stream no matter how many items are
//! generated or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SceneRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a path of stream labels into a child seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(master: u64, path: &[u64]) -> SceneRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

pub fn seeded(seed: u64) -> SceneRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream labels; distinct constants keep the families independent.
pub mod label {
    pub const FREEFALL: u64 = 0xF4EE_FA11;
    pub const WALK: u64 = 0x3A1C;
    pub const CAUSAL: u64 = 0xCA05A1;
    pub const BACKGROUND: u64 = 0xB6;
    pub const SCENE: u64 = 0x5CE7E;
}
