use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{labels, SeededRng};
use crate::tensor::Tensor;

/// Images (`(n, C, H, W)` or `(n, F)`) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn select(&self, idx: &[usize]) -> Split {
        Split {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// A dataset as distributed: an original training set and a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub name: String,
    pub train: Split,
    pub test: Split,
    pub num_classes: usize,
}

impl RawDataset {
    pub fn new(name: impl Into<String>, train: Split, test: Split) -> Result<Self> {
        if train.example_shape() != test.example_shape() {
            return Err(Error::Shape("train and test example shapes differ".into()));
        }
        let num_classes = train
            .labels
            .iter()
            .chain(&test.labels)
            .max()
            .map_or(0, |m| m + 1);
        Ok(Self {
            name: name.into(),
            train,
            test,
            num_classes,
        })
    }
}

/// Per-channel statistics of the proper training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    /// Channel = axis 1 for image tensors; flat features share one channel.
    pub fn compute(images: &Tensor) -> NormStats {
        let (channels, plane) = channel_layout(images);
        let n = images.rows();
        let mut mean = Vec::with_capacity(channels);
        let mut std = Vec::with_capacity(channels);
        for c in 0..channels {
            let (mut s, mut ss, mut count) = (0.0f64, 0.0f64, 0usize);
            for i in 0..n {
                let row = images.row(i);
                for &v in &row[c * plane..(c + 1) * plane] {
                    s += v as f64;
                    ss += (v as f64) * (v as f64);
                    count += 1;
                }
            }
            let m = s / count as f64;
            let var = (ss / count as f64 - m * m).max(0.0);
            mean.push(m as f32);
            std.push(if var > 1e-12 { var.sqrt() as f32 } else { 1.0 });
        }
        NormStats { mean, std }
    }

    pub fn apply(&self, images: &mut Tensor) {
        let (channels, plane) = channel_layout(images);
        let row_len = images.row_len();
        for row in images.data_mut().chunks_mut(row_len) {
            for c in 0..channels {
                let (m, s) = (self.mean[c], self.std[c]);
                for v in &mut row[c * plane..(c + 1) * plane] {
                    *v = (*v - m) / s;
                }
            }
        }
    }
}

fn channel_layout(images: &Tensor) -> (usize, usize) {
    match images.shape() {
        [_, c, h, w] => (*c, h * w),
        _ => (1, images.row_len()),
    }
}

/// A task ready for training: proper train / val / test splits, normalized
/// to the proper training split's statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    pub name: String,
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub norm: NormStats,
    pub num_classes: usize,
    /// Train-time augmentation (random horizontal flip and padded crop).
    pub augment: bool,
}

impl DatasetHandle {
    pub fn example_shape(&self) -> &[usize] {
        self.train.example_shape()
    }

    /// Builds a handle from a raw dataset whose examples already have the
    /// target shape: seeded 80/20 split, then normalization.
    pub fn from_raw(raw: RawDataset, seed: u64, augment: bool) -> Result<DatasetHandle> {
        if raw.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "dataset `{}` has fewer than two classes",
                raw.name
            )));
        }
        let (train_idx, val_idx) = split_indices(raw.train.len(), seed);
        if train_idx.is_empty() {
            return Err(Error::InvalidArgument(format!("dataset `{}` is empty", raw.name)));
        }
        let mut train = raw.train.select(&train_idx);
        let mut val = raw.train.select(&val_idx);
        let mut test = raw.test;
        let norm = NormStats::compute(&train.images);
        norm.apply(&mut train.images);
        if !val.is_empty() {
            norm.apply(&mut val.images);
        }
        if !test.is_empty() {
            norm.apply(&mut test.images);
        }
        Ok(DatasetHandle {
            name: raw.name,
            train,
            val,
            test,
            norm,
            num_classes: raw.num_classes,
            augment,
        })
    }

    /// Shuffled mini-batches of the proper training split for one epoch.
    /// The order depends only on `(seed, epoch)`.
    pub fn batches(&self, batch_size: usize, epoch: usize, rng: &SeededRng) -> BatchStream<'_> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng.stream(&format!("{}/{epoch}", labels::DATA_ORDER)));
        let augment = self.augment && self.train.images.rank() == 4;
        BatchStream {
            split: &self.train,
            order,
            batch_size: batch_size.max(1),
            pos: 0,
            augment: augment.then(|| rng.stream(&format!("{}/{epoch}", labels::AUGMENT))),
        }
    }
}

/// Seeded permutation split into ceil(0.8 n) train and floor(0.2 n) val indices.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut SeededRng::new(seed).stream(labels::SPLIT));
    let n_train = (4 * n).div_ceil(5);
    let val = idx.split_off(n_train);
    (idx, val)
}

pub struct BatchStream<'a> {
    split: &'a Split,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    augment: Option<crate::rng::StreamRng>,
}

impl Iterator for BatchStream<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let mut batch = self.split.select(idx);
        if let Some(rng) = self.augment.as_mut() {
            augment_batch(&mut batch.images, rng);
        }
        Some((batch.images, batch.labels))
    }
}

const CROP_PAD: usize = 4;

/// Horizontal flip with p = 0.5, then a random crop from the image padded
/// by 4 zero pixels per side.
pub fn augment_batch(images: &mut Tensor, rng: &mut impl Rng) {
    let &[_, c, h, w] = images.shape() else {
        return;
    };
    let per = c * h * w;
    for img in images.data_mut().chunks_mut(per) {
        let flip = rng.random_bool(0.5);
        let dy = rng.random_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
        let dx = rng.random_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
        let src = img.to_vec();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = x as isize + dx;
                    let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                    let v = if sy < 0 || sy >= h as isize || sx0 < 0 || sx0 >= w as isize {
                        0.0
                    } else {
                        src[ch * h * w + sy as usize * w + sx as usize]
                    };
                    img[ch * h * w + y * w + x] = v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> RawDataset {
        let train = Split::new(
            Tensor::new(vec![n, 2, 2, 2], (0..n * 8).map(|v| (v % 13) as f32).collect()).unwrap(),
            (0..n).map(|i| i % 3).collect(),
        )
        .unwrap();
        let test = train.select(&[0, 1]);
        RawDataset::new("toy", train, test).unwrap()
    }

    #[test]
    fn split_sizes_and_disjointness() {
        for n in [1usize, 5, 7, 10, 101] {
            let (a, b) = split_indices(n, 3);
            assert_eq!(a.len(), (4 * n).div_ceil(5));
            assert_eq!(b.len(), n / 5);
            let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
        assert_eq!(split_indices(50, 9), split_indices(50, 9));
        assert_ne!(split_indices(50, 9), split_indices(50, 10));
    }

    #[test]
    fn normalized_train_split_is_standardized() {
        let h = DatasetHandle::from_raw(toy(40), 0, false).unwrap();
        let stats = NormStats::compute(&h.train.images);
        for c in 0..2 {
            assert!(stats.mean[c].abs() < 1e-4);
            assert!((stats.std[c] - 1.0).abs() < 1e-3);
        }
        assert_eq!(h.num_classes, 3);
    }

    #[test]
    fn batch_order_is_seeded() {
        let h = DatasetHandle::from_raw(toy(40), 0, true).unwrap();
        let a: Vec<_> = h.batches(8, 2, &SeededRng::new(1)).collect();
        let b: Vec<_> = h.batches(8, 2, &SeededRng::new(1)).collect();
        let c: Vec<_> = h.batches(8, 3, &SeededRng::new(1)).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.iter().map(|(_, y)| y.len()).sum::<usize>(), h.train.len());
    }

    #[test]
    fn augmentation_keeps_shape_and_flips() {
        let mut t = Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut rng = SeededRng::new(0).stream("t");
        augment_batch(&mut t, &mut rng);
        assert_eq!(t.shape(), &[1, 1, 1, 3]);
    }
}
