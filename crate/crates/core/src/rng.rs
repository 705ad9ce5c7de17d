//! Named random sub-streams derived from one experiment seed.
//!
//! Every consumer (initialization, masking, data order, dropout) draws from
//! its own stream keyed by name and index, so adding draws in one consumer
//! never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INIT: &str = "init";
pub const MASKING: &str = "masking";
pub const DATA_ORDER: &str = "data-order";
pub const DROPOUT: &str = "dropout";

/// FNV-1a over the stream name, mixed with seed and index through SplitMix64.
pub fn derive_seed(seed: u64, stream: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(splitmix(seed ^ h) ^ index)
}

pub fn stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, name, index))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
