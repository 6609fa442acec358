//! Seed plumbing. Every stochastic step draws from a ChaCha stream whose seed
//! is derived from the run seed plus a path of stream identifiers, so results
//! do not depend on the order in which independent steps execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with each element of `path` into a new 64-bit seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_from(base: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, path))
}

// Stream tags, kept distinct so unrelated draws never share a stream.
pub(crate) const STREAM_SYNTH: u64 = 1;
pub(crate) const STREAM_SPLIT: u64 = 2;
pub(crate) const STREAM_NOISE: u64 = 3;
pub(crate) const STREAM_INIT: u64 = 4;
pub(crate) const STREAM_SHUFFLE: u64 = 5;
pub(crate) const STREAM_DROPOUT: u64 = 6;
pub(crate) const STREAM_WARP: u64 = 7;
