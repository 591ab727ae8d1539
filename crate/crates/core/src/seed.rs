//! Seed derivation for independent, reproducible random streams.
//!
//! Every random decision in a run (client subsampling, per-round client
//! selection, per-client shuffles, initializations) draws from its own
//! ChaCha stream keyed by the run seed plus a purpose tag, so adding or
//! reordering one consumer never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// One component of a stream key.
#[derive(Debug, Clone, Copy)]
pub enum Part<'a> {
    Int(u64),
    Str(&'a str),
}

/// Derives a 64-bit seed from the base seed, a tag and extra key parts.
pub fn derive(base: u64, tag: &str, parts: &[Part<'_>]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update((tag.len() as u64).to_le_bytes());
    hasher.update(tag.as_bytes());
    for part in parts {
        match part {
            Part::Int(v) => {
                hasher.update([0u8]);
                hasher.update(v.to_le_bytes());
            }
            Part::Str(s) => {
                hasher.update([1u8]);
                hasher.update((s.len() as u64).to_le_bytes());
                hasher.update(s.as_bytes());
            }
        }
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// A ChaCha stream for the given key.
pub fn stream(base: u64, tag: &str, parts: &[Part<'_>]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tag, parts))
}
