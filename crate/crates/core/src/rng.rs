//! Seeded random streams.
//!
//! Every consumer of randomness draws from a ChaCha stream selected by
//! `(seed, stream id)`. Distinct stream ids under one seed are independent
//! keystreams, so trajectory simulation, resampling and shuffling never share
//! variates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

pub mod streams {
    pub const TRAJECTORY: u64 = 1;
    pub const RESAMPLE: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const OUTER: u64 = 5;
    pub const INNER: u64 = 6;
}

pub fn stream(seed: u64, id: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Mixes a sub-index (epoch, worker, ...) into a seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
