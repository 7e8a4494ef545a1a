//! Deterministic stream derivation.
//!
//! Every stochastic component draws from a ChaCha8 stream derived from
//! (base seed, purpose tag, index). Identical inputs give bit-identical
//! streams on every platform, which is what makes whole runs replayable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; used only to disperse seed material.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derives an independent RNG stream for (seed, tag, index).
pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut state = splitmix(seed ^ fnv1a(tag));
    state = splitmix(state ^ index.wrapping_mul(0xd6e8feb86659fd93));
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_mut(8).enumerate() {
        state = splitmix(state.wrapping_add(i as u64));
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
