//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit seed
//! (`ChaCha8Rng::seed_from_u64`). Sub-streams, such as one per output
//! channel, derive their seed with [`mix`] so that results never depend on
//! the order in which work is scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream tags used to derive independent sub-streams from one seed.
pub const WEIGHT_STREAM: u64 = 0x5745_4947_4854_5300;
pub const HOLDOUT_STREAM: u64 = 0x484f_4c44_4f55_5400;

pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer over `seed + (index + 1) * φ`.
pub fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fisher-Yates shuffle, drawing `j` uniformly from `0..=i` for `i` descending.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
