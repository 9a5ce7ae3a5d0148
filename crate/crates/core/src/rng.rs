//! Seed derivation and stable hashing.
//!
//! Every random stream in the pipeline is derived from the user seed plus a
//! purpose tag and an index, so results do not depend on how work is split
//! across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const TAG_CANDIDATES: u64 = 0x0c41_d1da;
pub const TAG_REFINER: u64 = 0x4ef1_0e42;
pub const TAG_KMEANS: u64 = 0x6b3e_a115;
pub const TAG_ACQUIRE: u64 = 0xacc0_0e1e;
pub const TAG_RANDOM_SEARCH: u64 = 0x4a4d_5eed;
pub const TAG_ORACLE: u64 = 0x0e4a_c1e0;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a word sequence; stable across platforms and releases.
pub fn hash_words(seed: u64, words: impl IntoIterator<Item = u64>) -> u64 {
    words.into_iter().fold(mix64(seed), |acc, w| mix64(acc ^ mix64(w)))
}

pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    hash_words(seed, [tag, index])
}

pub fn substream(seed: u64, tag: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, tag, index))
}

/// Maps a hash to a uniform in the open interval (0, 1).
pub fn unit_open(h: u64) -> f64 {
    ((h >> 12) as f64 + 0.5) / (1u64 << 52) as f64
}
