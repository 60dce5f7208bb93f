//! Keyed, counter-style randomness.
//!
//! Every random decision in the pipeline is derived from a `(seed, purpose,
//! counters...)` key rather than from a shared mutable stream. This makes
//! results independent of evaluation order, worker count, and of which other
//! components happen to consume randomness — the property the training-time
//! determinism guarantees (resume equivalence, teacher independence from the
//! student) are built on.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit mix (splitmix64 finalizer). Good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over a string, used to turn purpose tags and sample ids into words.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Fold a list of words into a single seed.
pub fn key(words: &[u64]) -> u64 {
    let mut acc = 0x5151_5151_5151_5151u64;
    for w in words {
        acc = mix(acc ^ *w);
    }
    acc
}

/// ChaCha8 stream for `(seed, purpose, counters...)`.
pub fn stream(seed: u64, purpose: &str, counters: &[u64]) -> ChaCha8Rng {
    let mut words = Vec::with_capacity(counters.len() + 2);
    words.push(seed);
    words.push(hash_str(purpose));
    words.extend_from_slice(counters);
    ChaCha8Rng::seed_from_u64(key(&words))
}
