//! Seed derivation. Per-sample streams are keyed by hashing
//! `(global seed, purpose, sample id, ...)` so results never depend on the
//! order in which samples are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a over UTF-8 bytes; stable across platforms and releases.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive mix of several words into one seed.
pub fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6A09_E667_F3BC_C908, |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

/// Purpose tags so that different consumers of the same seed do not share
/// streams.
pub mod stream {
    pub const MASK: u64 = 1;
    pub const CAPTION: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SCENE: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const NOISE: u64 = 7;
}
