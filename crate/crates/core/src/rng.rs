// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded random streams.
//!
//! Every stochastic procedure draws from ChaCha8 seeded with the master seed.
//! Independent consumers get distinct ChaCha stream ids derived from a stable
//! label (a case id, a procedure name), so the values one consumer sees never
//! depend on how many draws another consumer made or on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Alias for the generator used everywhere in the crate.
pub type LabRng = ChaCha8Rng;

/// Stable 64-bit hash of a label (first eight bytes of SHA-256, little-endian).
pub fn stable_hash(label: &str) -> u64 {
    let digest = Sha256::digest(label.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Generator for `seed` on stream 0.
pub fn seeded(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for `seed` on the stream named by `label`.
pub fn stream(seed: u64, label: &str) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stable_hash(label));
    rng
}

/// `k` distinct entries of `pool`, drawn uniformly without replacement
/// in a seeded order.
pub fn sample_without_replacement<T: Copy>(pool: &[T], k: usize, rng: &mut LabRng) -> Option<Vec<T>> {
    if k > pool.len() {
        return None;
    }
    Some(
        rand::seq::index::sample(rng, pool.len(), k)
            .into_iter()
            .map(|i| pool[i])
            .collect(),
    )
}
