//! Counter-free substream derivation: every random stream is keyed by a
//! tuple of integers and a purpose tag, hashed into a ChaCha seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// 256-bit stream key plus a short numeric id for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamSeed([u8; 32]);

impl StreamSeed {
    pub fn derive(base_seed: u64, purpose: &str, fields: &[u64]) -> Self {
        let mut h = Sha256::new();
        h.update(b"ccr-stream-v1");
        h.update(base_seed.to_le_bytes());
        h.update((purpose.len() as u64).to_le_bytes());
        h.update(purpose.as_bytes());
        for f in fields {
            h.update(f.to_le_bytes());
        }
        StreamSeed(h.finalize().into())
    }

    /// First eight bytes of the key, little-endian.
    pub fn id(&self) -> u64 {
        let mut b = [0u8; 8];
        b.copy_from_slice(&self.0[..8]);
        u64::from_le_bytes(b)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.0)
    }
}
