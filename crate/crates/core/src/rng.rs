//! Keyed deterministic random streams.
//!
//! Every source of randomness in the lab is derived from a [`StreamKey`]:
//! a hash of a namespace string plus integer components. Streams are never
//! drawn from a global generator, so two consumers with the same key see
//! the same sequence on any platform (the CRN property).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A 256-bit key identifying one independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey([u8; 32]);

impl StreamKey {
    /// Derive a key from a namespace and integer components.
    pub fn derive(namespace: &str, components: &[u64]) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(namespace.as_bytes());
        for c in components {
            hasher.update(c.to_le_bytes());
        }
        StreamKey(hasher.finalize().into())
    }

    /// Derive a child key, e.g. one per SKU or per environment instance.
    pub fn child(&self, label: &str, index: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(self.0);
        hasher.update(label.as_bytes());
        hasher.update(index.to_le_bytes());
        StreamKey(hasher.finalize().into())
    }

    /// Instantiate the generator for this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.0)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}
