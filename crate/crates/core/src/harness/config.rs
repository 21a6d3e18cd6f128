use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, preprocess, BlobSpec, DatasetHandle, RawDataset, Transform};
use crate::error::{Error, Result};
use crate::lottery::{TicketConfig, WeightHandling};
use crate::nn::{ArchId, TrainOptions};
use crate::prune::{PruneMethod, PruningSpec};

/// Environment variable naming the root for relative dataset paths.
pub const DATA_DIR_ENV: &str = "TICKET_DATA_DIR";

/// JSON schema for [`ExperimentConfig`] documents.
pub const CONFIG_SCHEMA: &str = include_str!("../../schema/experiment.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: ArchId,
    /// Per-example input shape; defaults to `[1, 28, 28]` for conv nets and
    /// the first width for MLPs.
    #[serde(default)]
    pub input_shape: Option<Vec<usize>>,
    #[serde(default)]
    pub num_classes: Option<usize>,
    pub datasets: Vec<DatasetConfig>,
    #[serde(default = "default_pruning")]
    pub pruning: Vec<PruningSpec>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_handling")]
    pub handling: WeightHandling,
    #[serde(default)]
    pub final_round: bool,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Consensus threshold for the combined ticket; `None` = intersection.
    #[serde(default)]
    pub tau: Option<usize>,
    #[serde(default = "yes")]
    pub pret_a_porter: bool,
    #[serde(default)]
    pub transfer: Option<TransferConfig>,
    #[serde(default)]
    pub plots: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Also retrain a random ticket at the combined ticket's sparsity.
    #[serde(default = "yes")]
    pub random_baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub source: SourceConfig,
    #[serde(default)]
    pub transforms: Vec<Transform>,
    #[serde(default)]
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    /// Directory with `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
    /// `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte` (optionally `.gz`).
    Idx { dir: PathBuf },
    Blobs {
        classes: usize,
        per_class: usize,
        #[serde(default)]
        test_per_class: Option<usize>,
        #[serde(default = "default_separation")]
        separation: f64,
        seed: u64,
    },
}

fn default_pruning() -> Vec<PruningSpec> {
    vec![PruningSpec::new(PruneMethod::L1Unstructured, 0.2)]
}
fn default_iterations() -> usize {
    2
}
fn default_epochs() -> usize {
    5
}
fn default_lr() -> f32 {
    0.01
}
fn default_batch() -> usize {
    32
}
fn default_handling() -> WeightHandling {
    WeightHandling::Rewind
}
fn default_seeds() -> Vec<u64> {
    (0..6).collect()
}
fn default_jobs() -> usize {
    1
}
fn default_separation() -> f64 {
    3.0
}
fn yes() -> bool {
    true
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && !s.starts_with('.')
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let (Some(dir), Some(parent)) = (&cfg.data_dir, path.parent()) {
            if dir.is_relative() {
                cfg.data_dir = Some(parent.join(dir));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.datasets.is_empty() {
            return bad("`datasets` must not be empty".into());
        }
        let mut names = BTreeSet::new();
        for d in &self.datasets {
            if !valid_name(&d.name) {
                return bad(format!("dataset name `{}` must be [A-Za-z0-9._-]+", d.name));
            }
            if !names.insert(&d.name) {
                return bad(format!("duplicate dataset name `{}`", d.name));
            }
            if let SourceConfig::Blobs { classes, per_class, .. } = d.source {
                if classes < 2 || per_class == 0 {
                    return bad(format!("dataset `{}`: blobs need >= 2 classes and >= 1 example per class", d.name));
                }
            }
        }
        if self.pruning.is_empty() {
            return bad("`pruning` must not be empty".into());
        }
        let mut methods = BTreeSet::new();
        for p in &self.pruning {
            p.validate().map_err(|e| Error::Config(e.to_string()))?;
            if !methods.insert(p.method.name()) {
                return bad(format!("pruning method `{}` listed twice", p.method.name()));
            }
        }
        if self.seeds.is_empty() {
            return bad("`seeds` must not be empty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("duplicate seeds".into());
        }
        if self.iterations == 0 || self.epochs == 0 || self.batch_size == 0 || self.jobs == 0 {
            return bad("iterations, epochs, batch_size and jobs must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("learning rate {} must be finite and >= 0", self.lr));
        }
        if let Some(t) = self.tau {
            if t == 0 || t > self.datasets.len() {
                return bad(format!("tau {t} outside 1..={}", self.datasets.len()));
            }
        }
        if let Some(t) = &self.transfer {
            if t.epochs == 0 {
                return bad("transfer.epochs must be >= 1".into());
            }
        }
        if let Some(shape) = &self.input_shape {
            if shape.is_empty() || shape.contains(&0) {
                return bad(format!("input_shape {shape:?} must be non-empty with positive extents"));
            }
        }
        Ok(())
    }

    pub fn resolved_input_shape(&self) -> Vec<usize> {
        if let Some(s) = &self.input_shape {
            return s.clone();
        }
        match &self.arch {
            ArchId::Mlp(w) => vec![w.first().copied().unwrap_or(0)],
            _ => vec![1, 28, 28],
        }
    }

    pub fn ticket_config(&self, spec: &PruningSpec, seed: u64) -> TicketConfig {
        TicketConfig {
            iterations: self.iterations,
            epochs: self.epochs,
            pruning: spec.clone(),
            handling: self.handling,
            lr: self.lr,
            batch_size: self.batch_size,
            seed,
            final_round: self.final_round,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
        }
    }

    /// Root for relative dataset paths: `data_dir`, else `$TICKET_DATA_DIR`, else `.`.
    pub fn data_root(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{stem}[.gz] not found in {}", dir.display()),
    )))
}

/// Loads the four standard IDX files from `dir`.
pub fn load_idx_dir(name: &str, dir: &Path) -> Result<RawDataset> {
    let train = load_idx(
        find_idx(dir, "train-images-idx3-ubyte")?,
        find_idx(dir, "train-labels-idx1-ubyte")?,
    )?;
    let test = load_idx(find_idx(dir, "t10k-images-idx3-ubyte")?, find_idx(dir, "t10k-labels-idx1-ubyte")?)?;
    RawDataset::new(name, train, test)
}

impl DatasetConfig {
    /// Raw dataset after transforms, before conforming to the input shape.
    pub fn load_raw(&self, root: &Path, input_shape: &[usize]) -> Result<RawDataset> {
        let mut raw = match &self.source {
            SourceConfig::Idx { dir } => load_idx_dir(&self.name, &root.join(dir))?,
            &SourceConfig::Blobs { classes, per_class, test_per_class, separation, seed } => {
                let mut raw = BlobSpec {
                    classes,
                    per_class,
                    test_per_class,
                    shape: input_shape.to_vec(),
                    separation,
                    seed,
                }
                .generate()?;
                raw.name = self.name.clone();
                raw
            }
        };
        for t in &self.transforms {
            raw = t.apply(raw)?;
        }
        Ok(raw)
    }

    /// Loaded, conformed, split with `seed` and normalized.
    pub fn load(&self, root: &Path, input_shape: &[usize], seed: u64) -> Result<DatasetHandle> {
        preprocess(self.load_raw(root, input_shape)?, input_shape, self.augment, seed)
    }
}
