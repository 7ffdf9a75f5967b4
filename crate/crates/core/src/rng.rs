//! Seed derivation for independent, order-free random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used everywhere in the crate.
pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a stream label/index pair.
pub fn derive_seed(seed: u64, label: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ mix64(label)) ^ index)
}

/// A generator for stream `(label, index)` under `seed`.
pub fn stream(seed: u64, label: u64, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label, index))
}

pub fn from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream labels. Distinct constants keep sub-streams disjoint.
pub mod label {
    pub const SCENE: u64 = 1;
    pub const OBSERVE: u64 = 2;
    pub const OBSERVE_SHARED: u64 = 3;
    pub const KEYPOINTS: u64 = 4;
    pub const BIAS_TRIAL: u64 = 5;
    pub const RENDER: u64 = 6;
    pub const QUERY: u64 = 7;
    pub const RANSAC: u64 = 8;
    pub const SWEEP: u64 = 9;
    pub const GHOST: u64 = 10;
}
