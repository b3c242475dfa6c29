//! Named, seed-derived random substreams.
//!
//! Every random draw in the engine flows from a `(seed, name)` pair, e.g.
//! `substream(42, "truth/traj")` or `substream(42, "train/ep17/env")`. This
//! keeps components independently re-runnable: the ground truth generated for
//! seed 42 does not change when the training loop draws more or fewer random
//! numbers, and plan cells stay deterministic under thread-pool scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a over the seed bytes followed by the name bytes.
fn fnv1a(seed: u64, name: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(PRIME);
    }
    for b in name.as_bytes() {
        h = (h ^ u64::from(*b)).wrapping_mul(PRIME);
    }
    h
}

/// Derives a deterministic generator for the substream `name` under `seed`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a(seed, name))
}

/// Derives a child seed (for APIs that take a seed rather than a generator).
pub fn subseed(seed: u64, name: &str) -> u64 {
    fnv1a(seed, name)
}
