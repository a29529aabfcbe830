//! Seed derivation.
//!
//! All randomness descends from one root seed. A child stream is identified by
//! a `(parent seed, tag)` pair and its seed is `splitmix64(parent ^ splitmix64(tag))`.
//! Tags are small integers (trial index, sample index) or one of the named
//! constants below, so parallel work never shares a generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_DATA: u64 = 0xD474;
pub const STREAM_INIT: u64 = 0x1417;
pub const STREAM_TRAIN: u64 = 0x7A1D;
pub const STREAM_EMBEDDER: u64 = 0xE3BE;
pub const STREAM_SAMPLE: u64 = 0x5A3F;
pub const STREAM_EVAL: u64 = 0xE7A1;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(parent: u64, tag: u64) -> u64 {
    splitmix64(parent ^ splitmix64(tag))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(parent: u64, tag: u64) -> Rng {
    rng_from_seed(derive_seed(parent, tag))
}
