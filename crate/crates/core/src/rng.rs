//! Counter-based random substreams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by
//! `(seed, stream, index)`. Distinct keys give statistically independent
//! streams, so work can be split across threads in any order and still
//! produce identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Each consumer of randomness owns one tag.
pub mod stream {
    pub const PRICE_STEP: u64 = 1;
    pub const KAPPA: u64 = 2;
    pub const QUADRATURE: u64 = 3;
    pub const QUANTILE: u64 = 4;
    pub const TEST: u64 = 99;
}

pub fn substream(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(b"drbc-rng");
    ChaCha8Rng::from_seed(key)
}

/// Mixes a base seed with a sub-index (e.g. seed number in a suite).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
