//! Experiment configuration, dataset loading and reproducible run
//! directories.

mod config;
mod plot;
mod run;

pub use config::{load_idx_dir, DatasetConfig, ExperimentConfig, SourceConfig, TransferConfig, CONFIG_SCHEMA, DATA_DIR_ENV};
pub use plot::{curve_svg, logit, Series};
pub use run::{mean_std, run_experiment, sha256_hex, Manifest, RunSummary, CONFIG_FILE, FAILURES_FILE, MANIFEST_FILE, TIMINGS_FILE};
