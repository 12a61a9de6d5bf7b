//! Deterministic stream derivation.
//!
//! Every random stream is a ChaCha8 generator keyed by SHA-256 over the master
//! seed and a list of integer labels (stage, task, phase, ...). Streams do not
//! depend on thread scheduling or on the order in which they are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Stage labels used as the first stream label.
pub mod stage {
    pub const BATCH_FEATURES: u64 = 1;
    pub const ELIMINATION: u64 = 2;
    pub const CONTEXT_ESTIMATION: u64 = 3;
    pub const CONTEXT_FEATURES: u64 = 4;
    pub const REWARD_FREE: u64 = 5;
    pub const TEST: u64 = 99;
}

/// Source of independent, reproducible streams for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, labels: &[u64]) -> StreamRng {
        let mut h = Sha256::new();
        h.update(b"mtrep-stream-v1");
        h.update(self.seed.to_le_bytes());
        for l in labels {
            h.update(l.to_le_bytes());
        }
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }
}

/// Seed of one sweep cell: `sha256("mtrep-cell-v1" | master | algo | M | run_id)`,
/// first eight bytes little-endian. Stable across versions.
pub fn cell_seed(master: u64, algo: &str, tasks: usize, run_id: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"mtrep-cell-v1");
    h.update(master.to_le_bytes());
    h.update((algo.len() as u64).to_le_bytes());
    h.update(algo.as_bytes());
    h.update((tasks as u64).to_le_bytes());
    h.update((run_id as u64).to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
