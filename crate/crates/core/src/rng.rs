//! Seed derivation.
//!
//! Every random decision in the simulator draws from a ChaCha20 stream whose
//! seed is derived from the experiment seed plus a purpose tag and scope
//! indices (round, client, ...). Streams are therefore stateless with respect
//! to execution order: two runs that reach the same (seed, purpose, scope)
//! draw identical values no matter how many worker threads are active or
//! what happened earlier in the process. This is what makes checkpoint resume
//! and worker-count independence bitwise-exact.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Purpose tags. Values are part of the determinism contract: changing one
/// changes every downstream stream, so they are fixed constants rather than
/// an enum discriminant that could be reordered.
pub mod purpose {
    /// Client embedding-table / score-head initialization.
    pub const INIT: u64 = 0x01;
    /// Server-side initial global table.
    pub const GLOBAL_INIT: u64 = 0x02;
    /// Per-round participant selection.
    pub const SELECT: u64 = 0x03;
    /// Per-round training negative sampling.
    pub const NEG: u64 = 0x04;
    /// Per-epoch shuffling of a client's training samples.
    pub const SHUFFLE: u64 = 0x05;
    /// K-means seeding (one sub-stream per restart).
    pub const KMEANS: u64 = 0x06;
    /// Random-label broadcast (ablation arm).
    pub const RANDOM_LABELS: u64 = 0x07;
    /// Local differential-privacy perturbation.
    pub const LDP: u64 = 0x08;
    /// Evaluation negative sampling (leave-one-out candidate lists).
    pub const EVAL: u64 = 0x09;
    /// Leave-one-out timestamp tie-breaking.
    pub const SPLIT: u64 = 0x0a;
    /// Per-round item subsample for the contrastive term on huge catalogs.
    pub const SUBSAMPLE: u64 = 0x0b;
    /// Validation-user slice for early stopping.
    pub const VALIDATION: u64 = 0x0c;
    /// Synthetic data generation.
    pub const SYNTHETIC: u64 = 0x0d;
    /// Per-cell seeds of a hyper-parameter grid.
    pub const GRID: u64 = 0x0e;
}

/// splitmix64: the standard 64-bit finalizer-style mixer. Used only to absorb
/// scope words into a seed; the stream itself is ChaCha20.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent ChaCha20 stream from the experiment seed and a list
/// of scope words (purpose tag first, then round / client / ... indices).
pub fn derive_rng(seed: u64, scope: &[u64]) -> ChaCha20Rng {
    let mut state = seed;
    let mut key = [0u8; 32];
    // Absorb the scope, then squeeze 4 words. The absorb loop keeps streams
    // for different scopes disjoint; the squeeze fills the 256-bit key.
    let _ = splitmix64(&mut state);
    for &word in scope {
        state ^= word.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let _ = splitmix64(&mut state);
    }
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha20Rng::from_seed(key)
}

/// Collapses a seed plus scope words into a single u64, for handing a
/// narrower sub-seed to an operation that derives its own streams from it.
pub fn derive_seed(seed: u64, scope: &[u64]) -> u64 {
    let mut state = seed;
    let _ = splitmix64(&mut state);
    for &word in scope {
        state ^= word.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let _ = splitmix64(&mut state);
    }
    splitmix64(&mut state)
}

/// Stable 64-bit content hash (FNV-1a). `std::hash` makes no cross-version
/// stability promise, so fingerprints that end up in checkpoints or reports
/// use this instead.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
