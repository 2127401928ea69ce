//! Deterministic seed fan-out.
//!
//! A single global seed is expanded into per-module sub-seeds via
//! `sub_seed = LE64(SHA-256(global_seed_le || b"/" || name)[..8])`, so each
//! subsystem (data generation, init, rollouts, ...) owns an independent
//! stream and nondeterminism sources stay isolated.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a sub-seed for a named module from the global seed.
pub fn sub_seed(global_seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update(b"/");
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// The RNG used everywhere in this crate. ChaCha8 is reproducible across
/// platforms and fast enough for this workload.
pub type Rng = ChaCha8Rng;

pub fn rng_from(global_seed: u64, name: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(global_seed, name))
}
