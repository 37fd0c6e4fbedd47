//! Deterministic RNG lineages. Every parallel unit of work (chain, split, fold,
//! repetition, subject) gets its own ChaCha stream derived from a master seed, so
//! results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `(domain, index)` under `master`.
pub fn derive_seed(master: u64, domain: u64, index: u64) -> u64 {
    mix(mix(master ^ mix(domain)) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn stream(master: u64, domain: u64, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, domain, index))
}

pub mod domain {
    pub const CHAIN: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const SUBJECT: u64 = 3;
    pub const REPETITION: u64 = 4;
    pub const FOLD: u64 = 5;
    pub const BOOTSTRAP: u64 = 6;
    pub const SPLIT_ASSIGN: u64 = 7;
    pub const INIT: u64 = 8;
    pub const PILOT: u64 = 9;
}
