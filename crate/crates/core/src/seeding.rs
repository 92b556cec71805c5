//! Stable seed derivation, so that every random stream depends only on the
//! run seed and a label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Hashes `(seed, tag, parts)` into a new 64-bit seed.
pub fn derive_seed(seed: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn derive_rng(seed: u64, tag: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, parts))
}

/// Stable 64-bit key for a string such as a stay id.
pub fn string_key(s: &str) -> u64 {
    derive_seed(0, s, &[])
}
