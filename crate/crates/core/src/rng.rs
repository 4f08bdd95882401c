//! Deterministic derivation of independent random streams.
//!
//! Every stochastic component takes its randomness from a ChaCha stream
//! seeded by mixing the experiment seed with a role label and indices
//! (round, client, step). Streams therefore never depend on thread
//! scheduling or execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a base seed and a list of stream coordinates into one child seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut acc = mix(base);
    for &p in parts {
        acc = mix(acc ^ p.wrapping_mul(0xff51_afd7_ed55_8ccd));
    }
    acc
}

/// A seeded generator for the stream identified by `parts`.
pub fn stream(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

/// Stable role labels used across the simulator.
pub mod role {
    pub const INIT_WEIGHTS: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const LOCAL_SGD: u64 = 3;
    pub const NELB_EVAL: u64 = 4;
    pub const DATASET: u64 = 5;
    pub const BENCH: u64 = 6;
}
