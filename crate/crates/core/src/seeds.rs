//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from a hash
//! of a base seed and a list of labels, so streams do not depend on the order
//! or thread in which work units run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Hash a base seed and labels into a 64-bit seed.
pub fn derive(base: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(base: u64, labels: &[&str]) -> ChaCha8Rng {
    rng(derive(base, labels))
}
