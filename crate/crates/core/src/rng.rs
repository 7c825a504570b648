//! Seeded generator streams. Every random draw in the crate comes from a
//! stream derived from the single run seed, so parallel work stays
//! reproducible regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream namespaces; the low 32 bits carry a per-item index.
pub mod tag {
    pub const COHORT: u64 = 1;
    pub const COUNTERFACTUAL: u64 = 2;
    pub const POLICY: u64 = 3;
    pub const KMEANS: u64 = 4;
    pub const GAP_REFERENCE: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const LSTM: u64 = 7;
    pub const GRADCHECK: u64 = 8;
}

pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 32) | (index & 0xffff_ffff));
    rng
}

/// A derived `u64` seed, for APIs that take a seed rather than a generator.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    use rand::RngCore;
    stream(seed, tag, index).next_u64()
}
