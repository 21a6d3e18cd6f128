//! Seeded, label-split random streams.
//!
//! Every consumer of randomness asks for a stream by label (`"init"`,
//! `"data-order/3"`, `"pruning"`, `"split"`, ...). The stream seed is the
//! SHA-256 digest of the experiment seed and the label, so draws do not
//! depend on call order between independent consumers, thread count, or
//! platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Well-known stream labels.
pub mod labels {
    pub const INIT: &str = "init";
    pub const DATA_ORDER: &str = "data-order";
    pub const PRUNING: &str = "pruning";
    pub const SPLIT: &str = "split";
    pub const AUGMENT: &str = "augment";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeededRng {
    seed: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn digest(&self, label: &str) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
        let out = hasher.finalize();
        let mut bytes = [0u8; 32];
        bytes.copy_from_slice(&out);
        bytes
    }

    /// Independent generator for `label`.
    pub fn stream(&self, label: &str) -> StreamRng {
        ChaCha8Rng::from_seed(self.digest(label))
    }

    /// A child seed namespace, e.g. one per pruning iteration.
    pub fn derive(&self, label: &str) -> SeededRng {
        let d = self.digest(label);
        let mut word = [0u8; 8];
        word.copy_from_slice(&d[..8]);
        SeededRng::new(u64::from_le_bytes(word))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_and_label_give_same_draws() {
        let a: Vec<u32> = SeededRng::new(7).stream("init").random_iter().take(16).collect();
        let b: Vec<u32> = SeededRng::new(7).stream("init").random_iter().take(16).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn labels_and_seeds_separate_streams() {
        let a: u64 = SeededRng::new(7).stream("init").random();
        let b: u64 = SeededRng::new(7).stream("split").random();
        let c: u64 = SeededRng::new(8).stream("init").random();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(SeededRng::new(1).derive("x"), SeededRng::new(1).derive("y"));
    }

    #[test]
    fn first_draw_is_pinned() {
        // Reference values from a standalone ChaCha8 + SHA-256 implementation.
        let v: u64 = SeededRng::new(0).stream("init").random();
        assert_eq!(v, 0x6f4d_5268_1296_3277);
        assert_eq!(SeededRng::new(0).derive("a").seed(), 15_710_096_957_630_639_915);
    }
}
