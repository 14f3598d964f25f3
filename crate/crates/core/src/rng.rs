use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, purpose, index)`, e.g. one per training step.
///
/// Deriving instead of threading one generator through a run makes every
/// step reproducible on its own, which is what checkpoint resume relies on.
pub fn derive_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let s = splitmix64(splitmix64(splitmix64(seed) ^ purpose) ^ index);
    ChaCha8Rng::seed_from_u64(s)
}

pub mod purpose {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const STEP: u64 = 3;
    pub const CROPS: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const EMBEDDER: u64 = 6;
}
