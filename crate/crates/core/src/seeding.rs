//! Deterministic seed derivation.
//!
//! Every random decision in the pipeline draws from a ChaCha stream whose
//! seed is derived from (base seed, domain label, key). Hashing rather than
//! arithmetic (`seed + index`) keeps streams statistically independent and
//! makes derived seeds stable across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from a base seed, a domain label, and an index.
pub fn derive_seed(base: u64, domain: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(domain.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Derive a child seed keyed by a string (e.g. a clip id), so the result
/// does not depend on enumeration order.
pub fn derive_seed_str(base: u64, domain: &str, key: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(domain.as_bytes());
    hasher.update([0xff]); // separate domain from key
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Seeded RNG used throughout the crate.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
