//! Batched layer kernels over flat NCHW / NF buffers.
//!
//! Summation order is fixed by the loop nest, so every kernel is
//! bit-reproducible for a given input.

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in range.
    #[inline]
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        // ix = ox*s + kx - pad >= 0  <=>  ox >= ceil((pad - kx) / s)
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        // ix < w  <=>  ox*s < w + pad - kx
        let lim = self.w + self.pad;
        let hi = if lim <= kx {
            0
        } else {
            (lim - kx).div_ceil(self.stride).min(self.ow)
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

pub(crate) fn conv_forward(x: &[f32], batch: usize, g: &ConvGeom, weight: &[f32], bias: &[f32]) -> Vec<f32> {
    let (c, o_n, k) = (g.in_ch, g.out_ch, g.kernel);
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let mut y = vec![0.0f32; batch * o_n * out_plane];
    for n in 0..batch {
        for o in 0..o_n {
            let ys = &mut y[(n * o_n + o) * out_plane..(n * o_n + o + 1) * out_plane];
            ys.fill(bias[o]);
            for i in 0..c {
                let xs = &x[(n * c + i) * in_plane..(n * c + i + 1) * in_plane];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[((o * c + i) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = g.ox_range(kx);
                        for oy in 0..g.oh {
                            let Some(iy) = g.input_row(oy, ky) else { continue };
                            let yrow = &mut ys[oy * g.ow..(oy + 1) * g.ow];
                            let xrow = &xs[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let off = kx as isize - g.pad as isize;
                                let xin = &xrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                                for (yv, &xv) in yrow[lo..hi].iter_mut().zip(xin) {
                                    *yv += wv * xv;
                                }
                            } else {
                                for ox in lo..hi {
                                    yrow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Accumulates weight and bias gradients; returns the input gradient when asked.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f32],
    dy: &[f32],
    batch: usize,
    g: &ConvGeom,
    weight: &[f32],
    dweight: &mut [f32],
    dbias: &mut [f32],
    want_dx: bool,
) -> Option<Vec<f32>> {
    let (c, o_n, k) = (g.in_ch, g.out_ch, g.kernel);
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let mut dx = want_dx.then(|| vec![0.0f32; batch * c * in_plane]);
    for n in 0..batch {
        for o in 0..o_n {
            let dys = &dy[(n * o_n + o) * out_plane..(n * o_n + o + 1) * out_plane];
            dbias[o] += dys.iter().sum::<f32>();
            for i in 0..c {
                let base = (n * c + i) * in_plane;
                let xs = &x[base..base + in_plane];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((o * c + i) * k + ky) * k + kx;
                        let wv = weight[widx];
                        let (lo, hi) = g.ox_range(kx);
                        let mut acc = 0.0f32;
                        for oy in 0..g.oh {
                            let Some(iy) = g.input_row(oy, ky) else { continue };
                            let dyrow = &dys[oy * g.ow..(oy + 1) * g.ow];
                            for ox in lo..hi {
                                let ix = ox * g.stride + kx - g.pad;
                                acc += dyrow[ox] * xs[iy * g.w + ix];
                                if wv != 0.0 {
                                    if let Some(dx) = dx.as_mut() {
                                        dx[base + iy * g.w + ix] += wv * dyrow[ox];
                                    }
                                }
                            }
                        }
                        dweight[widx] += acc;
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn linear_forward(x: &[f32], batch: usize, inf: usize, outf: usize, weight: &[f32], bias: &[f32]) -> Vec<f32> {
    let mut y = vec![0.0f32; batch * outf];
    for n in 0..batch {
        let xr = &x[n * inf..(n + 1) * inf];
        for o in 0..outf {
            let wr = &weight[o * inf..(o + 1) * inf];
            let mut acc = bias[o];
            for (a, b) in wr.iter().zip(xr) {
                if *a != 0.0 {
                    acc += a * b;
                }
            }
            y[n * outf + o] = acc;
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    x: &[f32],
    dy: &[f32],
    batch: usize,
    inf: usize,
    outf: usize,
    weight: &[f32],
    dweight: &mut [f32],
    dbias: &mut [f32],
    want_dx: bool,
) -> Option<Vec<f32>> {
    let mut dx = want_dx.then(|| vec![0.0f32; batch * inf]);
    for n in 0..batch {
        let xr = &x[n * inf..(n + 1) * inf];
        for o in 0..outf {
            let d = dy[n * outf + o];
            if d == 0.0 {
                continue;
            }
            dbias[o] += d;
            let dw = &mut dweight[o * inf..(o + 1) * inf];
            for (g, &xv) in dw.iter_mut().zip(xr) {
                *g += d * xv;
            }
            if let Some(dx) = dx.as_mut() {
                let wr = &weight[o * inf..(o + 1) * inf];
                for (g, &wv) in dx[n * inf..(n + 1) * inf].iter_mut().zip(wr) {
                    *g += d * wv;
                }
            }
        }
    }
    dx
}

pub(crate) fn relu_forward(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub(crate) fn relu_backward(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
        .collect()
}

/// Non-overlapping max pool; returns outputs and the flat input index of each max.
pub(crate) fn maxpool_forward(x: &[f32], planes: usize, h: usize, w: usize, k: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / k, w / k);
    let mut y = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for py in 0..oh {
            for px in 0..ow {
                let mut best = base + py * k * w + px * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let j = base + (py * k + dy) * w + px * k + dx;
                        if x[j] > x[best] {
                            best = j;
                        }
                    }
                }
                y.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (y, idx)
}

pub(crate) fn maxpool_backward(dy: &[f32], argmax: &[u32], input_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; input_len];
    for (&d, &j) in dy.iter().zip(argmax) {
        dx[j as usize] += d;
    }
    dx
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub(crate) fn softmax_cross_entropy(logits: &[f32], labels: &[usize], classes: usize) -> (f64, Vec<f32>) {
    let batch = labels.len();
    let mut grad = vec![0.0f32; logits.len()];
    let mut total = 0.0f64;
    for (n, &y) in labels.iter().enumerate() {
        let row = &logits[n * classes..(n + 1) * classes];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[y] as f64;
        for (c, g) in grad[n * classes..(n + 1) * classes].iter_mut().enumerate() {
            let p = (row[c] as f64 - lse).exp();
            let t = if c == y { 1.0 } else { 0.0 };
            *g = ((p - t) / batch as f64) as f32;
        }
    }
    (total / batch as f64, grad)
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        for k in [2usize, 3, 10, 100] {
            let (loss, _) = softmax_cross_entropy(&vec![0.37; k], &[k - 1], k);
            assert!((loss - (k as f64).ln()).abs() < 1e-6, "k={k}: {loss}");
        }
    }

    #[test]
    fn conv_matches_naive_with_padding_and_stride() {
        // 1 example, 2 in-ch, 5x4 input, 3 out-ch, k=3, stride 2, pad 1
        let g = ConvGeom { in_ch: 2, out_ch: 3, kernel: 3, stride: 2, pad: 1, h: 5, w: 4, oh: 3, ow: 2 };
        let x: Vec<f32> = (0..40).map(|v| (v as f32 * 0.37).sin()).collect();
        let w: Vec<f32> = (0..54).map(|v| (v as f32 * 0.11).cos()).collect();
        let b = [0.1, -0.2, 0.3];
        let y = conv_forward(&x, 1, &g, &w, &b);
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..2 {
                    let mut acc = b[o] as f64;
                    for i in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if !(0..5).contains(&iy) || !(0..4).contains(&ix) {
                                    continue;
                                }
                                acc += w[((o * 2 + i) * 3 + ky) * 3 + kx] as f64
                                    * x[i * 20 + iy as usize * 4 + ix as usize] as f64;
                            }
                        }
                    }
                    assert!((y[o * 6 + oy * 2 + ox] as f64 - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_max() {
        let x = [1.0, 5.0, 2.0, 3.0];
        let (y, idx) = maxpool_forward(&x, 1, 2, 2, 2);
        assert_eq!(y, vec![5.0]);
        assert_eq!(maxpool_backward(&[2.0], &idx, 4), vec![0.0, 2.0, 0.0, 0.0]);
    }
}
