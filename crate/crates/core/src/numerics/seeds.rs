// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named random substreams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives an independent generator for `stream` from `seed`. Distinct
/// stream names (`"model-init"`, `"data"`, `"dict-init"`,
/// `"buffer-shuffle"`, ...) give statistically unrelated sequences.
pub fn substream(seed: u64, stream: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// A child seed for `stream`, for APIs that take a plain `u64`.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    use rand::RngCore;
    substream(seed, stream).next_u64()
}
