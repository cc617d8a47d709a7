//! Splittable seeding. Every random draw comes from a ChaCha8 stream whose
//! 64-bit seed is the first 8 bytes (little endian) of
//! `SHA-256(seed_le || purpose || 0x00 || site_id || 0x00 || index_le ...)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Generator family recorded in manifests and checkpoints.
pub const RNG_ALGORITHM: &str = "chacha8;stream=sha256(seed,purpose,site,indices)";

pub type Rng = ChaCha8Rng;

/// Seed of the stream named by `(seed, purpose, site, indices)`.
pub fn stream_seed(seed: u64, purpose: &str, site: &str, indices: &[i64]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update([0u8]);
    h.update(site.as_bytes());
    h.update([0u8]);
    for i in indices {
        h.update(i.to_le_bytes());
    }
    let d = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    u64::from_le_bytes(b)
}

pub fn stream(seed: u64, purpose: &str, site: &str, indices: &[i64]) -> Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, purpose, site, indices))
}
