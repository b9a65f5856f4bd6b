//! Seed derivation. Every stochastic step draws from a ChaCha stream keyed by
//! a tuple of integers, so results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a root seed with a path of stream identifiers.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |acc, p| splitmix(acc ^ splitmix(*p)))
}

pub fn rng_for(seed: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, path))
}

// Stream tags.
pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_SAMPLE: u64 = 2;
pub(crate) const STREAM_CLIENT: u64 = 3;
pub(crate) const STREAM_HEAD: u64 = 4;
