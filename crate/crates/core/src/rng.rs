//! Seeded random streams.
//!
//! Every consumer of randomness (a rollout, a proposal draw, a training
//! round) gets its own stream derived from the run seed and a path of
//! integers, so results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub(crate) mod tag {
    pub const PROPOSAL: u64 = 1;
    pub const ROLLOUT: u64 = 2;
    pub const RESAMPLE: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const INIT: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const BELIEF: u64 = 7;
    pub const EXEC: u64 = 8;
    pub const CHOICE: u64 = 9;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for `(seed, path...)`.
pub fn stream(seed: u64, path: &[u64]) -> SimRng {
    let mut h = splitmix64(seed);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    ChaCha8Rng::seed_from_u64(h)
}
