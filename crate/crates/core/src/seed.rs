//! Domain-separated seed derivation.
//!
//! `seed = SHA-256("unineuron/" ‖ domain ‖ 0x00 ‖ for each part: u64 LE length ‖ bytes)`,
//! and the 32-byte digest seeds a ChaCha8 stream. Every random draw in a
//! run descends from the manifest's master seed through this function.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(domain: &str, parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"unineuron/");
    h.update(domain.as_bytes());
    h.update([0u8]);
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

pub fn derive_rng(domain: &str, parts: &[&[u8]]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(domain, parts))
}

/// First eight digest bytes as a `u64`, for places that record a seed.
pub fn derive_u64(domain: &str, parts: &[&[u8]]) -> u64 {
    let d = derive_seed(domain, parts);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
