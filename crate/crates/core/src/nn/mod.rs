//! Minimal deterministic neural-network engine: masked forward/backward,
//! SGD, seeded initialization, snapshots and checkpoints.

mod arch;
mod network;
pub(crate) mod ops;
mod params;
mod train;

pub use arch::{trace_shape, ArchId, LayerKind, LayerSpec};
pub use network::{build_network, output_shape, Grads, Network};
pub use params::{LayerParams, ParamSet, ParamSnapshot};
pub use train::{train, train_from, EpochLog, TrainLog, TrainOptions};
