//! Seed derivation.
//!
//! Every random draw in training and evaluation comes from a ChaCha8 stream
//! whose seed is derived from a master seed and a path of integers
//! (purpose tag, epoch, batch, slot, ...). Streams are independent of the
//! order in which they are consumed, so results do not depend on
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags used by the trainer and evaluator.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const NEGATIVE: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const KMEANS: u64 = 6;
    pub const NOISE: u64 = 7;
    pub const SYNTHETIC: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `path` into `master` with splitmix64. Distinct paths give
/// unrelated seeds; the same path always gives the same seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(master: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, path))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
