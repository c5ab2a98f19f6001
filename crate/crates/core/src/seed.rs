//! Hierarchical seed derivation.
//!
//! Every random stream in a run is derived from the master seed and a label
//! path such as `["round", "2", "client", "7", "train"]`. Streams are keyed by
//! a SHA-256 digest of the path, so adding a client or a round never shifts
//! the streams of anything else.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The RNG type used for every simulated stream.
pub type SimRng = ChaCha8Rng;

/// Derives the 32-byte stream key for `labels` under `master_seed`.
pub fn derive_key<S: AsRef<str>>(master_seed: u64, labels: &[S]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"qahfl-seed-tree/v1");
    hasher.update(master_seed.to_le_bytes());
    for label in labels {
        let bytes = label.as_ref().as_bytes();
        // length prefix keeps ("ab","c") and ("a","bc") apart
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    }
    hasher.finalize().into()
}

/// Returns the seeded stream for `labels` under `master_seed`.
pub fn seed_tree<S: AsRef<str>>(master_seed: u64, labels: &[S]) -> SimRng {
    SimRng::from_seed(derive_key(master_seed, labels))
}

/// Derives a 64-bit child seed, for APIs that take a plain integer.
pub fn child_seed<S: AsRef<str>>(master_seed: u64, labels: &[S]) -> u64 {
    let key = derive_key(master_seed, labels);
    u64::from_le_bytes(key[..8].try_into().expect("8 bytes"))
}
