//! Keyed, counter-style random streams.
//!
//! Every random decision in the crate draws from a stream derived from
//! `(seed, purpose, a, b)`. Streams are independent of each other and of the
//! order in which they are opened, so adding or removing one consumer never
//! shifts the numbers seen by another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn mix_str(h: u64, s: &str) -> u64 {
    s.bytes().fold(h, |acc, b| splitmix64(acc ^ u64::from(b)))
}

/// Deterministic generator for the stream identified by the key tuple.
pub fn stream(seed: u64, purpose: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed ^ 0x5851_f42d_4c95_7f2d);
    h = mix_str(h, purpose);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b);
    ChaCha8Rng::seed_from_u64(h)
}
