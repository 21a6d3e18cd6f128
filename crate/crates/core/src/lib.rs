//! Sourcing, comparing, combining and analysing lottery tickets: sparse
//! trainable sub-networks of small neural networks.
//!
//! * [`nn`]: deterministic masked training engine.
//! * [`prune`]: the seven pruning rules, as pure mask transforms.
//! * [`algebra`]: Jaccard / Hamming distances, consensus counting, thresholds.
//! * [`lottery`]: iterative magnitude pruning, consensus ("prêt-à-porter")
//!   tickets, random baselines, retraining and at-init evaluation.
//! * [`analysis`]: effective sparsity, init statistics, prediction agreement.
//! * [`data`] and [`harness`]: datasets and reproducible experiment runs.

pub mod algebra;
pub mod analysis;
pub mod data;
pub mod error;
pub mod harness;
mod io_util;
pub mod lottery;
pub mod mask;
pub mod nn;
pub mod pool;
pub mod prune;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use mask::{LayerMask, Mask, MaskMeta};
pub use rng::SeededRng;
pub use tensor::Tensor;
