//! Seeded random streams.
//!
//! Every consumer of randomness derives its own generator from the run seed
//! and a fixed tag path, so adding a draw in one place never shifts the
//! numbers seen elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod tags {
    pub const MODEL_INIT: u64 = 1;
    pub const CLASSIFIER_INIT: u64 = 2;
    pub const BATCH_ORDER: u64 = 3;
    pub const CLASS_ORDER: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const SYNTHETIC: u64 = 6;
    pub const PROBE: u64 = 7;
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Generator keyed by `seed` and a tag path such as `[BATCH_ORDER, task, epoch]`.
pub fn derive(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let key = path.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)));
    ChaCha8Rng::seed_from_u64(key)
}
