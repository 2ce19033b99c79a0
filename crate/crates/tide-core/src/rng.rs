//! Counter-based deterministic RNG streams.
//!
//! Every random draw in the pipeline comes from a stream derived from a
//! root seed plus a list of integer tags (e.g. `[stage, epoch, item]`).
//! Streams depend only on `(seed, tags)`, never on call order, so
//! parallel and serial execution produce bit-identical results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, cheap, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent RNG stream from a root seed and a tag path.
///
/// The 256-bit ChaCha key is built by folding each tag into the running
/// state with splitmix64, then expanding. Distinct tag paths yield
/// independent streams with overwhelming probability.
pub fn derive(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed ^ 0x6a09_e667_f3bc_c908);
    for (i, &t) in tags.iter().enumerate() {
        state = mix(state ^ mix(t.wrapping_add((i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))));
    }
    let mut key = [0u8; 32];
    let mut s = state;
    for chunk in key.chunks_exact_mut(8) {
        s = mix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
