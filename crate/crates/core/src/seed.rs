//! Counter-based seed expansion.
//!
//! All randomness in a run descends from one top-level seed. Child seeds are
//! derived from `(parent, index)` with a SplitMix64 finalizer, so work items
//! can be processed in any order, or in parallel, and still draw the same
//! numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the `index`-th child stream of `parent`.
pub fn derive(parent: u64, index: u64) -> u64 {
    mix64(parent.wrapping_add(GOLDEN_GAMMA.wrapping_mul(index.wrapping_add(1))))
}

/// Seed for a named child stream, e.g. a document id.
pub fn derive_str(parent: u64, label: &str) -> u64 {
    // FNV-1a, stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    derive(parent, h)
}

/// Deterministic generator for a derived seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
