//! Seed splitting for replica streams.
//!
//! A replica stream is `ChaCha8Rng` seeded with
//! `splitmix64(seed ^ splitmix64(tag))` and switched to stream `replica`.
//! `tag` separates independent uses of one user seed (the main dynamics,
//! nested inner paths, ...). Streams never overlap, so results do not depend
//! on which worker simulates which replica.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags used by the estimators.
pub mod tags {
    pub const DYNAMICS: u64 = 0x6479_6e61_6d69_6373;
    pub const INNER: u64 = 0x696e_6e65_7200_0001;
    pub const PROBES: u64 = 0x7072_6f62_6573_0002;
    pub const CHAIN: u64 = 0x6368_6169_6e00_0003;
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for replica `replica` of the stream family `(seed, tag)`.
pub fn stream_rng(seed: u64, tag: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(tag)));
    rng.set_stream(replica);
    rng
}

/// Derived sub-seed, used when a nested computation needs its own family.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(tag)) ^ splitmix64(index.wrapping_add(1)))
}
