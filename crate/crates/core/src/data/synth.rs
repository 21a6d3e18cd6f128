use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{RawDataset, Split};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Gaussian class clusters with unit noise.
///
/// Class centres sit at distance `separation` (in noise standard
/// deviations) from each other: when `classes <= dim` they are scaled
/// orthonormal directions, otherwise random unit directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    #[serde(default)]
    pub test_per_class: Option<usize>,
    /// Per-example shape, e.g. `[2]` or `[1, 28, 28]`.
    pub shape: Vec<usize>,
    pub separation: f64,
    pub seed: u64,
}

pub fn synth_blobs(k: usize, n: usize, shape: &[usize], separation: f64, seed: u64) -> Result<RawDataset> {
    BlobSpec {
        classes: k,
        per_class: n,
        test_per_class: None,
        shape: shape.to_vec(),
        separation,
        seed,
    }
    .generate()
}

impl BlobSpec {
    pub fn generate(&self) -> Result<RawDataset> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!("blobs need >= 2 classes, got {}", self.classes)));
        }
        if self.per_class == 0 || self.shape.is_empty() || self.shape.contains(&0) {
            return Err(Error::InvalidArgument("blobs need a positive size and shape".into()));
        }
        let root = SeededRng::new(self.seed);
        let centers = self.centers(&mut root.stream("blob-centres"));
        let test_n = self.test_per_class.unwrap_or((self.per_class / 4).max(1));
        let train = self.sample(&centers, self.per_class, &mut root.stream("blob-train"))?;
        let test = self.sample(&centers, test_n, &mut root.stream("blob-test"))?;
        RawDataset::new(format!("blobs-{}", self.seed), train, test)
    }

    fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn centers(&self, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        let dim = self.dim();
        let radius = self.separation / std::f64::consts::SQRT_2;
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.classes);
        while out.len() < self.classes {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            if self.classes <= dim {
                for u in &out {
                    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            out.push(v.iter().map(|a| a / norm).collect());
        }
        out.into_iter()
            .map(|u| u.into_iter().map(|a| a * radius).collect())
            .collect()
    }

    fn sample(&self, centers: &[Vec<f64>], per_class: usize, rng: &mut impl Rng) -> Result<Split> {
        let dim = self.dim();
        let n = per_class * self.classes;
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        // Interleave classes so that prefixes stay balanced.
        for _ in 0..per_class {
            for (c, centre) in centers.iter().enumerate() {
                for &m in centre {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push((m + z) as f32);
                }
                labels.push(c);
            }
        }
        let mut shape = vec![n];
        shape.extend(&self.shape);
        if shape.len() == 2 || shape.len() == 4 {
            Split::new(Tensor::new(shape, data)?, labels)
        } else {
            Err(Error::InvalidArgument(format!("unsupported blob shape {:?}", self.shape)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_centroid_accuracy(train: &Split, test: &Split, k: usize) -> f64 {
        let d = train.images.row_len();
        let mut cent = vec![vec![0.0f64; d]; k];
        let mut cnt = vec![0usize; k];
        for i in 0..train.len() {
            cnt[train.labels[i]] += 1;
            for (c, &v) in cent[train.labels[i]].iter_mut().zip(train.images.row(i)) {
                *c += v as f64;
            }
        }
        for (c, n) in cent.iter_mut().zip(&cnt) {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let correct = (0..test.len())
            .filter(|&i| {
                let x = test.images.row(i);
                let best = (0..k)
                    .min_by(|&a, &b| {
                        let da: f64 = cent[a].iter().zip(x).map(|(c, &v)| (c - v as f64).powi(2)).sum();
                        let db: f64 = cent[b].iter().zip(x).map(|(c, &v)| (c - v as f64).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                best == test.labels[i]
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn wide_separation_is_perfectly_separable() {
        let raw = synth_blobs(3, 200, &[2], 10.0, 4).unwrap();
        assert_eq!(nearest_centroid_accuracy(&raw.train, &raw.test, 3), 1.0);
        assert_eq!(nearest_centroid_accuracy(&raw.train, &raw.train, 3), 1.0);
    }

    #[test]
    fn centres_are_pairwise_separated() {
        let spec = BlobSpec { classes: 4, per_class: 1, test_per_class: None, shape: vec![6], separation: 3.0, seed: 1 };
        let c = spec.centers(&mut SeededRng::new(1).stream("x"));
        for i in 0..4 {
            for j in 0..i {
                let d: f64 = c[i].iter().zip(&c[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!((d - 3.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_seeds_identical_data() {
        let a = synth_blobs(2, 10, &[1, 4, 4], 2.0, 5).unwrap();
        let b = synth_blobs(2, 10, &[1, 4, 4], 2.0, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_blobs(2, 10, &[1, 4, 4], 2.0, 6).unwrap());
        assert!(synth_blobs(1, 10, &[2], 2.0, 5).is_err());
    }
}
