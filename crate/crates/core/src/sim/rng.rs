//! Named random sub-streams.
//!
//! Every consumer of randomness derives its own ChaCha8 stream from the run
//! seed, a purpose label and a list of identifiers. Draws on one stream never
//! shift another, so enabling or disabling unrelated activity leaves, for
//! example, a link's delivery sequence untouched.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn stream(seed: u64, purpose: &str, ids: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    for id in ids {
        h.update(id.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
