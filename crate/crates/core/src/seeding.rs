//! Deterministic seed derivation. Every random stream in the crate is a
//! `ChaCha8Rng` seeded from a hash of its parent seed and a label, so
//! streams are independent and reproducible regardless of call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(base: u64, label: &str, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derive_rng(base: u64, label: &str, parts: &[u64]) -> Rng {
    rng_from(derive_seed(base, label, parts))
}
