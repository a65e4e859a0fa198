//! Seeded random streams.
//!
//! Every run has a single root seed. Components never share a generator;
//! they derive their own stream from `(seed, label, index)`, so the bytes a
//! component draws do not depend on what any other component did first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

/// Derive an independent generator for `label`/`index` under `seed`.
pub fn substream(seed: u64, label: &str, index: u64) -> Stream {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// A child seed for a named component.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    use rand::RngCore;
    substream(seed, label, 0).next_u64()
}
