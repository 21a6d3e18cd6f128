use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetHandle, RawDataset, Split};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Deterministic dataset rewrites used to derive related tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Transform {
    /// Keep the first `train` (and `test`) examples.
    Subset { train: usize, test: Option<usize> },
    /// `v -> 1 - v` on [0, 1] pixels.
    Invert,
    /// Fixed seeded permutation of the features of every example.
    PermutePixels { seed: u64 },
    /// Swap the two spatial axes.
    Transpose,
    /// `y -> (y + by) mod k`.
    ShiftLabels { by: usize },
}

impl Transform {
    pub fn apply(&self, mut raw: RawDataset) -> Result<RawDataset> {
        match self {
            Transform::Subset { train, test } => {
                let keep = |s: &Split, n: usize| s.select(&(0..n.min(s.len())).collect::<Vec<_>>());
                raw.train = keep(&raw.train, *train);
                if let Some(t) = test {
                    raw.test = keep(&raw.test, *t);
                }
            }
            Transform::Invert => {
                for s in [&mut raw.train, &mut raw.test] {
                    s.images.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
                }
            }
            Transform::PermutePixels { seed } => {
                let d = raw.train.images.row_len();
                let mut perm: Vec<usize> = (0..d).collect();
                perm.shuffle(&mut SeededRng::new(*seed).stream("permute-pixels"));
                for s in [&mut raw.train, &mut raw.test] {
                    let data = s.images.data_mut();
                    for row in data.chunks_mut(d) {
                        let src = row.to_vec();
                        for (dst, &p) in row.iter_mut().zip(&perm) {
                            *dst = src[p];
                        }
                    }
                }
            }
            Transform::Transpose => {
                for s in [&mut raw.train, &mut raw.test] {
                    let &[n, c, h, w] = s.images.shape() else {
                        return Err(Error::InvalidArgument("transpose needs image data".into()));
                    };
                    let src = s.images.data().to_vec();
                    let mut out = vec![0.0f32; src.len()];
                    for p in 0..n * c {
                        for y in 0..h {
                            for x in 0..w {
                                out[p * h * w + x * h + y] = src[p * h * w + y * w + x];
                            }
                        }
                    }
                    s.images = Tensor::new(vec![n, c, w, h], out)?;
                }
            }
            Transform::ShiftLabels { by } => {
                let k = raw.num_classes;
                for s in [&mut raw.train, &mut raw.test] {
                    s.labels.iter_mut().for_each(|y| *y = (*y + by) % k);
                }
            }
        }
        Ok(raw)
    }
}

/// Bilinear resize with half-pixel centres, `(n, C, H, W) -> (n, C, oh, ow)`.
pub fn resize_bilinear(images: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let &[n, c, h, w] = images.shape() else {
        return Err(Error::Shape(format!("resize needs (n, C, H, W), got {:?}", images.shape())));
    };
    if (h, w) == (oh, ow) {
        return Ok(images.clone());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f32)
            })
            .collect()
    };
    let ys = axis(oh, h);
    let xs = axis(ow, w);
    let src = images.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                let bottom = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                out.push(top * (1.0 - ly) + bottom * ly);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Channel adaptation: RGB -> gray by luminance, other C -> 1 by mean,
/// 1 -> C by replication.
pub fn adapt_channels(images: &Tensor, channels: usize) -> Result<Tensor> {
    let &[n, c, h, w] = images.shape() else {
        return Err(Error::Shape("channel adaptation needs image data".into()));
    };
    if c == channels {
        return Ok(images.clone());
    }
    let plane = h * w;
    let src = images.data();
    let mut out = Vec::with_capacity(n * channels * plane);
    for i in 0..n {
        let img = &src[i * c * plane..(i + 1) * c * plane];
        if channels == 1 {
            for p in 0..plane {
                let v = if c == 3 {
                    (0..3).map(|ch| LUMA[ch] * img[ch * plane + p]).sum()
                } else {
                    (0..c).map(|ch| img[ch * plane + p]).sum::<f32>() / c as f32
                };
                out.push(v);
            }
        } else if c == 1 {
            for _ in 0..channels {
                out.extend_from_slice(img);
            }
        } else {
            return Err(Error::Shape(format!("cannot adapt {c} channels to {channels}")));
        }
    }
    Tensor::new(vec![n, channels, h, w], out)
}

/// Reshapes every split of `raw` to `target` (per-example) shape.
pub fn conform(raw: RawDataset, target: &[usize]) -> Result<RawDataset> {
    let fit = |s: Split| -> Result<Split> {
        let shape = s.example_shape().to_vec();
        if shape == target {
            return Ok(s);
        }
        let n = s.len();
        let images = match (shape.as_slice(), target) {
            (&[_, _, _], &[tc, th, tw]) => {
                let t = adapt_channels(&s.images, tc)?;
                resize_bilinear(&t, th, tw)?
            }
            (_, _) if shape.iter().product::<usize>() == target.iter().product::<usize>() => {
                let mut full = vec![n];
                full.extend(target);
                s.images.reshape(full)?
            }
            (&[_, _, _], &[f]) => {
                // Image into a flat input: resize to the closest square, then flatten.
                let side = (f as f64).sqrt().round() as usize;
                if side * side != f {
                    return Err(Error::Shape(format!("cannot fit {shape:?} into [{f}]")));
                }
                let t = resize_bilinear(&adapt_channels(&s.images, 1)?, side, side)?;
                t.reshape(vec![n, f])?
            }
            _ => return Err(Error::Shape(format!("cannot fit {shape:?} into {target:?}"))),
        };
        Split::new(images, s.labels)
    };
    Ok(RawDataset {
        train: fit(raw.train)?,
        test: fit(raw.test)?,
        ..raw
    })
}

/// Conforms `raw` to the architecture's input shape, splits 80/20 with
/// `seed`, and normalizes to the proper training split.
pub fn preprocess(raw: RawDataset, input_shape: &[usize], augment: bool, seed: u64) -> Result<DatasetHandle> {
    let raw = conform(raw, input_shape)?;
    DatasetHandle::from_raw(raw, seed, augment)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_32_to_gray_28() {
        // Constant-colour image: every output pixel is the luminance of the colour.
        let mut data = Vec::new();
        for v in [0.2f32, 0.6, 1.0] {
            data.extend(std::iter::repeat_n(v, 32 * 32));
        }
        let t = Tensor::new(vec![1, 3, 32, 32], data).unwrap();
        let g = resize_bilinear(&adapt_channels(&t, 1).unwrap(), 28, 28).unwrap();
        assert_eq!(g.shape(), &[1, 1, 28, 28]);
        let expect = 0.299 * 0.2 + 0.587 * 0.6 + 0.114 * 1.0;
        assert!(g.data().iter().all(|v| (v - expect).abs() < 1e-6));
    }

    #[test]
    fn bilinear_hand_case() {
        // 2x2 -> 4x4 with half-pixel centres: first row = [a, .75a+.25b, .25a+.75b, b].
        let t = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 4.0, 8.0, 12.0]).unwrap();
        let r = resize_bilinear(&t, 4, 4).unwrap();
        assert_eq!(&r.data()[..4], &[0.0, 1.0, 3.0, 4.0]);
        assert_eq!(&r.data()[12..], &[8.0, 9.0, 11.0, 12.0]);
    }

    #[test]
    fn transforms_behave() {
        let img = Tensor::new(vec![2, 1, 2, 3], vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 1.0, 0.9, 0.8, 0.7, 0.6, 0.5]).unwrap();
        let split = Split::new(img, vec![0, 1]).unwrap();
        let raw = RawDataset::new("t", split.clone(), split).unwrap();
        let t = Transform::Transpose.apply(raw.clone()).unwrap();
        assert_eq!(t.train.images.shape(), &[2, 1, 3, 2]);
        assert_eq!(&t.train.images.data()[..6], &[0.0, 0.3, 0.1, 0.4, 0.2, 0.5]);
        let inv = Transform::Invert.apply(raw.clone()).unwrap();
        assert!((inv.train.images.data()[1] - 0.9).abs() < 1e-6);
        let shifted = Transform::ShiftLabels { by: 1 }.apply(raw.clone()).unwrap();
        assert_eq!(shifted.train.labels, vec![1, 0]);
        let p = Transform::PermutePixels { seed: 3 }.apply(raw.clone()).unwrap();
        let mut a = p.train.images.row(0).to_vec();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(a, raw.train.images.row(0).to_vec());
        let sub = Transform::Subset { train: 1, test: None }.apply(raw).unwrap();
        assert_eq!(sub.train.len(), 1);
        assert_eq!(sub.test.len(), 2);
    }
}
