//! Named, reproducible random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Independent generator for `(root, name, index)`.
///
/// Streams with different names or indices are disjoint for practical
/// purposes: each seed is a SHA-256 digest of the triple.
pub fn stream(root: u64, name: &str, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Like [`stream`] with two indices, e.g. `(epoch, clip)`.
pub fn stream2(root: u64, name: &str, a: u64, b: u64) -> Rng {
    stream(root, name, a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.rotate_left(17))
}
