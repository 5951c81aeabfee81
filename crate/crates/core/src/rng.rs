//! Seeded random streams.
//!
//! Every random choice in the toolkit flows from one user seed. Components
//! draw from a named sub-stream (`"da"`, `"cluster"`, `"init"`, `"shuffle"`,
//! ...) so that changing how one component consumes randomness never shifts
//! the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_DA: &str = "da";
pub const STREAM_CLUSTER: &str = "cluster";
pub const STREAM_INIT: &str = "init";
pub const STREAM_SHUFFLE: &str = "shuffle";

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// SplitMix64 finalizer, used to derive child seeds.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for the named sub-stream of `seed`.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    mix64(seed ^ fnv1a64(name.as_bytes()))
}

/// Seed for the `index`-th draw of a named sub-stream (e.g. one per batch).
pub fn derive_indexed(seed: u64, name: &str, index: u64) -> u64 {
    mix64(derive_seed(seed, name) ^ mix64(index))
}

pub fn from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, name: &str) -> Rng {
    from_seed(derive_seed(seed, name))
}
