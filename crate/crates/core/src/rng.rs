//! Deterministic RNG derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream derived from a
//! root seed plus a few context tags (step index, clip index, ...). Deriving
//! a fresh stream per (seed, tags) tuple makes runs reproducible and lets a
//! resumed training run replay exactly the same draws as an uninterrupted
//! one.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// ChaCha8 stream keyed by a root seed and context tags.
pub fn derive_rng(root: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = root ^ 0xD6E8_FEB8_6659_FD93;
    let mut mixed = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0xA24B_AED4_963E_E407);
        mixed ^= splitmix64(&mut state);
    }
    let mut seed = [0u8; 32];
    let mut s = mixed;
    for chunk in seed.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
