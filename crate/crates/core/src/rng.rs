//! Seed derivation for reproducible runs.
//!
//! Every random decision in a run (init, shuffling, augmentation,
//! corpus sampling) draws from a ChaCha stream whose seed is derived
//! from the run seed plus a fixed tag path, so results never depend on
//! execution order or thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 step; the standard way to stretch one u64 seed into many.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed and a tag path.
pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    let mut state = root;
    let mut out = splitmix64(&mut state);
    for &tag in tags {
        state ^= tag.wrapping_mul(0x2545_f491_4f6c_dd1d);
        out ^= splitmix64(&mut state);
    }
    out
}

/// Seeded RNG for a (root, tags) path.
pub fn rng_from(root: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tags))
}
