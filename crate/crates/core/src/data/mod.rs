//! Dataset loading, synthetic tasks and preprocessing.

mod dataset;
mod idx;
mod preprocess;
mod synth;

pub use dataset::{augment_batch, split_indices, BatchStream, DatasetHandle, NormStats, RawDataset, Split};
pub use idx::{encode_idx, load_idx, parse_idx, read_idx_file, split_from_idx, IdxArray};
pub use preprocess::{adapt_channels, conform, preprocess, resize_bilinear, Transform};
pub use synth::{synth_blobs, BlobSpec};
