//! Seed derivation. Every random stream in the crate is keyed by one root
//! 64-bit seed plus a list of integer tags, so independent tasks can draw
//! their own streams without sharing generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `seed`. Distinct tag lists give unrelated seeds.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}

// Stream tags, one per consumer.
pub(crate) const TAG_SPEAKER: u64 = 1;
pub(crate) const TAG_UTTERANCE: u64 = 2;
pub(crate) const TAG_INIT: u64 = 3;
pub(crate) const TAG_SHUFFLE: u64 = 4;
pub(crate) const TAG_NOISE: u64 = 5;
pub(crate) const TAG_CONTENT: u64 = 6;
pub(crate) const TAG_CONTENT_PLAN: u64 = 7;
