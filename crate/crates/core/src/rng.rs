//! Seed derivation.
//!
//! Every random stream in a run descends from one root seed. A stream is
//! named by a stage label and an index; the derived seed is the first eight
//! bytes (little-endian) of `SHA-256(root_le || stage || index_le)`. Streams
//! derived this way do not depend on thread scheduling, so parallel fan-out
//! over seeds, Monte-Carlo runs, or timesteps reproduces sequential results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(root: u64, stage: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(stage.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(root: u64, stage: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(root, stage, index))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
