use rand::Rng;

use super::arch::{trace_shape, ArchId, LayerKind, LayerSpec};
use super::ops::{self, ConvGeom};
use super::params::{LayerParams, ParamSet, ParamSnapshot};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::rng::{labels, SeededRng};
use crate::tensor::Tensor;

/// Gradients for every prunable layer, congruent with [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<(Vec<f32>, Vec<f32>)>,
}

struct Trace {
    /// `acts[i]` is the input to layer `i`; the last entry is the output.
    acts: Vec<Vec<f32>>,
    pool_idx: Vec<Vec<u32>>,
}

#[derive(Debug, Clone)]
pub struct Network {
    arch: Option<ArchId>,
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<LayerSpec>,
    /// Per-example input shape of every layer, plus the output shape.
    shapes: Vec<Vec<usize>>,
    /// Index into `params.layers` for prunable layers.
    param_of: Vec<Option<usize>>,
    params: ParamSet,
    mask: Mask,
    init_snapshot: ParamSnapshot,
}

/// Builds a named architecture with seeded uniform initialization.
pub fn build_network(arch: &ArchId, input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Network> {
    let layers = arch.layers(input_shape, num_classes)?;
    let mut net = Network::from_layers(layers, input_shape, seed)?;
    net.arch = Some(arch.clone());
    Ok(net)
}

impl Network {
    /// Builds a network from an explicit layer list.
    ///
    /// Weights and biases are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    /// on the `init` stream, layer by layer, weight before bias.
    pub fn from_layers(layers: Vec<LayerSpec>, input_shape: &[usize], seed: u64) -> Result<Network> {
        let mut rng = SeededRng::new(seed).stream(labels::INIT);
        let mut params = Vec::new();
        for layer in &layers {
            let (Some(shape), Some(fan_in)) = (layer.kind.weight_shape(), layer.kind.fan_in()) else {
                continue;
            };
            let bound = 1.0 / (fan_in as f32).sqrt();
            let n: usize = shape.iter().product();
            let out = shape[0];
            let w = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            let b = (0..out).map(|_| rng.random_range(-bound..bound)).collect();
            params.push(LayerParams {
                name: layer.name.clone(),
                weight: Tensor::new(shape, w)?,
                bias: Tensor::new(vec![out], b)?,
            });
        }
        Network::with_params(None, layers, input_shape, ParamSet::new(params))
    }

    fn with_params(arch: Option<ArchId>, layers: Vec<LayerSpec>, input_shape: &[usize], params: ParamSet) -> Result<Network> {
        for (i, l) in layers.iter().enumerate() {
            if layers[..i].iter().any(|o| o.name == l.name) {
                return Err(Error::InvalidArgument(format!("duplicate layer name `{}`", l.name)));
            }
        }
        let mut shapes = vec![input_shape.to_vec()];
        for l in &layers {
            let next = l
                .kind
                .output_shape(shapes.last().unwrap())
                .map_err(|reason| Error::IncompatibleInput {
                    arch: arch.as_ref().map_or("custom".into(), |a| a.to_string()),
                    input: input_shape.to_vec(),
                    reason: format!("layer `{}`: {reason}", l.name),
                })?;
            shapes.push(next);
        }
        let out = shapes.last().unwrap();
        if out.len() != 1 || out[0] == 0 {
            return Err(Error::InvalidArgument(format!(
                "network must end in a vector of logits, got {out:?}"
            )));
        }
        let num_classes = out[0];
        let mut param_of = Vec::with_capacity(layers.len());
        let mut next = 0;
        for l in &layers {
            if let Some(shape) = l.kind.weight_shape() {
                let p = params.layers.get(next).ok_or_else(|| {
                    Error::Shape(format!("missing parameters for layer `{}`", l.name))
                })?;
                if p.name != l.name || p.weight.shape() != shape.as_slice() || p.bias.shape() != [shape[0]] {
                    return Err(Error::Shape(format!("parameters do not match layer `{}`", l.name)));
                }
                param_of.push(Some(next));
                next += 1;
            } else {
                param_of.push(None);
            }
        }
        if next != params.layers.len() {
            return Err(Error::Shape("more parameter tensors than prunable layers".into()));
        }
        let mask = params.all_ones_mask();
        let init_snapshot = ParamSnapshot {
            params: params.clone(),
            epoch_tag: 0,
        };
        Ok(Network {
            arch,
            input_shape: input_shape.to_vec(),
            num_classes,
            layers,
            shapes,
            param_of,
            params,
            mask,
            init_snapshot,
        })
    }

    /// Rebuilds `arch` around given parameters (e.g. a ticket's init).
    pub fn from_params(arch: &ArchId, input_shape: &[usize], num_classes: usize, params: ParamSet) -> Result<Network> {
        let layers = arch.layers(input_shape, num_classes)?;
        Network::with_params(Some(arch.clone()), layers, input_shape, params)
    }

    pub fn arch(&self) -> Option<&ArchId> {
        self.arch.as_ref()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-example shape entering layer `i` (`i == layers().len()` gives the output).
    pub fn shape_before(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable stored parameters. Masked entries keep their stored value but
    /// never reach the forward pass.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn set_mask(&mut self, mask: Mask) -> Result<()> {
        self.params.check_mask(&mask)?;
        self.mask = mask;
        Ok(())
    }

    pub fn init_snapshot(&self) -> &ParamSnapshot {
        &self.init_snapshot
    }

    pub fn snapshot(&self, epoch_tag: usize) -> ParamSnapshot {
        ParamSnapshot {
            params: self.params.clone(),
            epoch_tag,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.params.weight_count()
    }

    /// Restores every unpruned weight and every bias from `snapshot`.
    /// Pruned weights keep their stored value and stay zero under the mask.
    pub fn rewind(&mut self, snapshot: &ParamSnapshot) -> Result<()> {
        self.params.check_same_shapes(&snapshot.params)?;
        for ((p, s), m) in self
            .params
            .layers
            .iter_mut()
            .zip(&snapshot.params.layers)
            .zip(self.mask.layers())
        {
            let w = p.weight.data_mut();
            for i in m.iter_ones() {
                w[i] = s.weight.data()[i];
            }
            p.bias.data_mut().copy_from_slice(s.bias.data());
        }
        Ok(())
    }

    /// Weights as seen by the forward pass: stored value where unpruned, +0 elsewhere.
    pub fn effective_weights(&self) -> Vec<Vec<f32>> {
        self.params
            .layers
            .iter()
            .zip(self.mask.layers())
            .map(|(p, m)| {
                p.weight
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| if m.get(i) { w } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        if batch.shape().len() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "batch shape {:?} does not match input shape {:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        Ok(batch.shape()[0])
    }

    fn conv_geom(&self, i: usize) -> ConvGeom {
        let LayerKind::Conv2d { in_ch, out_ch, kernel, stride, pad } = self.layers[i].kind else {
            unreachable!("layer {i} is not a conv")
        };
        let (inp, out) = (&self.shapes[i], &self.shapes[i + 1]);
        ConvGeom { in_ch, out_ch, kernel, stride, pad, h: inp[1], w: inp[2], oh: out[1], ow: out[2] }
    }

    fn run(&self, input: &[f32], n: usize, weights: &[Vec<f32>], keep: bool) -> Trace {
        let mut acts: Vec<Vec<f32>> = Vec::with_capacity(if keep { self.layers.len() + 1 } else { 1 });
        let mut pool_idx = Vec::new();
        let mut cur = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let next = match layer.kind {
                LayerKind::Conv2d { .. } => {
                    let p = self.param_of[i].unwrap();
                    let g = self.conv_geom(i);
                    ops::conv_forward(&cur, n, &g, &weights[p], self.params.layers[p].bias.data())
                }
                LayerKind::Linear { in_features, out_features } => {
                    let p = self.param_of[i].unwrap();
                    ops::linear_forward(&cur, n, in_features, out_features, &weights[p], self.params.layers[p].bias.data())
                }
                LayerKind::Relu => ops::relu_forward(&cur),
                LayerKind::MaxPool2d { kernel } => {
                    let s = &self.shapes[i];
                    let (y, idx) = ops::maxpool_forward(&cur, n * s[0], s[1], s[2], kernel);
                    if keep {
                        pool_idx.push(idx);
                    }
                    y
                }
                LayerKind::Flatten => std::mem::take(&mut cur),
            };
            if keep {
                acts.push(std::mem::replace(&mut cur, next));
            } else {
                cur = next;
            }
        }
        acts.push(cur);
        Trace { acts, pool_idx }
    }

    /// Logits `(batch, num_classes)` computed with masked weights.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let n = self.check_batch(batch)?;
        let weights = self.effective_weights();
        let mut trace = self.run(batch.data(), n, &weights, false);
        Ok(Tensor::from_parts(vec![n, self.num_classes], trace.acts.pop().unwrap()))
    }

    /// Mean softmax cross-entropy over the batch and gradients of every parameter.
    /// Gradients of pruned weights are zero.
    pub fn loss_and_grads(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, Grads)> {
        let n = self.check_batch(batch)?;
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range")));
        }
        let weights = self.effective_weights();
        let trace = self.run(batch.data(), n, &weights, true);
        let (loss, mut grad) = ops::softmax_cross_entropy(trace.acts.last().unwrap(), labels, self.num_classes);

        let mut grads: Vec<(Vec<f32>, Vec<f32>)> = self
            .params
            .layers
            .iter()
            .map(|p| (vec![0.0; p.weight.len()], vec![0.0; p.bias.len()]))
            .collect();
        let first_param_layer = self.param_of.iter().position(Option::is_some).unwrap_or(0);
        let mut pool_slot = self.pool_idx_count();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.acts[i];
            let want_dx = i > first_param_layer;
            grad = match layer.kind {
                LayerKind::Conv2d { .. } => {
                    let p = self.param_of[i].unwrap();
                    let g = self.conv_geom(i);
                    let (dw, db) = &mut grads[p];
                    match ops::conv_backward(x, &grad, n, &g, &weights[p], dw, db, want_dx) {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                LayerKind::Linear { in_features, out_features } => {
                    let p = self.param_of[i].unwrap();
                    let (dw, db) = &mut grads[p];
                    match ops::linear_backward(x, &grad, n, in_features, out_features, &weights[p], dw, db, want_dx) {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                LayerKind::Relu => ops::relu_backward(x, &grad),
                LayerKind::MaxPool2d { .. } => {
                    pool_slot -= 1;
                    ops::maxpool_backward(&grad, &trace.pool_idx[pool_slot], x.len())
                }
                LayerKind::Flatten => grad,
            };
        }
        for ((dw, _), m) in grads.iter_mut().zip(self.mask.layers()) {
            for (j, g) in dw.iter_mut().enumerate() {
                if !m.get(j) {
                    *g = 0.0;
                }
            }
        }
        Ok((loss, Grads { layers: grads }))
    }

    fn pool_idx_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::MaxPool2d { .. }))
            .count()
    }

    /// Plain SGD step; pruned weights are left untouched.
    pub fn apply_sgd(&mut self, grads: &Grads, lr: f32) {
        for ((p, (dw, db)), m) in self.params.layers.iter_mut().zip(&grads.layers).zip(self.mask.layers()) {
            let w = p.weight.data_mut();
            for i in m.iter_ones() {
                w[i] -= lr * dw[i];
            }
            for (b, g) in p.bias.data_mut().iter_mut().zip(db) {
                *b -= lr * g;
            }
        }
    }

    /// Argmax class per example.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        Ok((0..logits.rows()).map(|i| ops::argmax(logits.row(i))).collect())
    }

    /// Fraction of correctly classified examples, evaluated in chunks.
    pub fn accuracy(&self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let preds = self.predict_all(images)?;
        let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(correct as f64 / labels.len() as f64)
    }

    pub fn predict_all(&self, images: &Tensor) -> Result<Vec<usize>> {
        const CHUNK: usize = 256;
        let n = images.rows();
        let mut preds = Vec::with_capacity(n);
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(CHUNK) {
            preds.extend(self.predict(&images.select_rows(chunk))?);
        }
        Ok(preds)
    }
}

/// Shape of the network output for `layers` on `input` (helper for callers
/// assembling custom layer lists).
pub fn output_shape(layers: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>> {
    trace_shape(layers, input).map_err(Error::Shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp221(w1: [f32; 4], b1: [f32; 2], w2: [f32; 2], b2: f32) -> Network {
        let layers = vec![
            LayerSpec::new("fc1", LayerKind::Linear { in_features: 2, out_features: 2 }),
            LayerSpec::new("relu1", LayerKind::Relu),
            LayerSpec::new("fc2", LayerKind::Linear { in_features: 2, out_features: 2 }),
        ];
        let mut net = Network::from_layers(layers, &[2], 0).unwrap();
        let p = net.params_mut();
        p.layers[0].weight.data_mut().copy_from_slice(&w1);
        p.layers[0].bias.data_mut().copy_from_slice(&b1);
        p.layers[1].weight.data_mut().copy_from_slice(&[w2[0], w2[1], 0.0, 0.0]);
        p.layers[1].bias.data_mut().copy_from_slice(&[b2, 0.0]);
        net
    }

    #[test]
    fn hand_evaluated_two_layer_mlp() {
        let net = mlp221([0.5, -1.0, 2.0, 0.25], [0.1, -0.3], [1.5, -2.0], 0.2);
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let y = net.forward(&x).unwrap();
        // example 1: h = relu([0.5-2+0.1, 2+0.5-0.3]) = [0, 2.2]; out0 = -4.4+0.2
        // example 2: h = relu([-0.5-0.5+0.1, -2+0.125-0.3]) = [0, 0]; out0 = 0.2
        let expect = [-4.2f32, 0.0, 0.2, 0.0];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_mask_on_last_layer_with_zero_bias_gives_zero_logits() {
        let mut net = build_network(&ArchId::Mlp(vec![4, 3, 2]), &[4], 2, 3).unwrap();
        net.params_mut().layers[1].bias.data_mut().fill(0.0);
        let mut mask = net.mask().clone();
        mask.layers_mut()[1] = crate::mask::LayerMask::filled("fc2", vec![2, 3], false);
        net.set_mask(mask).unwrap();
        let x = Tensor::new(vec![3, 4], (0..12).map(|v| v as f32).collect()).unwrap();
        assert!(net.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn build_is_deterministic_and_bounded() {
        let a = build_network(&ArchId::LeNet, &[1, 28, 28], 10, 0).unwrap();
        let b = build_network(&ArchId::LeNet, &[1, 28, 28], 10, 0).unwrap();
        assert_eq!(a.params(), b.params());
        let c = build_network(&ArchId::LeNet, &[1, 28, 28], 10, 1).unwrap();
        assert_ne!(a.params(), c.params());
        for (p, fan_in) in a.params().layers.iter().zip([9usize, 54, 400, 120, 84]) {
            let bound = 1.0 / (fan_in as f32).sqrt();
            assert!(p.weight.data().iter().chain(p.bias.data()).all(|v| v.abs() <= bound));
        }
        assert_eq!(a.init_snapshot().epoch_tag, 0);
        assert_eq!(a.mask().count_zeros(), 0);
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let net = build_network(&ArchId::Mlp(vec![4, 3, 2]), &[4], 2, 0).unwrap();
        let x = Tensor::new(vec![1, 5], vec![0.0; 5]).unwrap();
        assert!(matches!(net.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn rewind_restores_unpruned_and_biases_only() {
        let mut net = build_network(&ArchId::Mlp(vec![4, 3, 2]), &[4], 2, 0).unwrap();
        let snap = net.snapshot(0);
        for p in &mut net.params_mut().layers {
            p.weight.data_mut().iter_mut().for_each(|w| *w += 1.0);
            p.bias.data_mut().iter_mut().for_each(|w| *w += 1.0);
        }
        let mut mask = net.mask().clone();
        mask.layers_mut()[0].set(5, false);
        net.set_mask(mask).unwrap();
        net.rewind(&snap).unwrap();
        let (now, then) = (&net.params().layers[0], &snap.params.layers[0]);
        for i in 0..12 {
            if i == 5 {
                assert_eq!(now.weight.data()[i], then.weight.data()[i] + 1.0);
            } else {
                assert_eq!(now.weight.data()[i], then.weight.data()[i]);
            }
        }
        assert_eq!(now.bias, then.bias);
        assert_eq!(net.effective_weights()[0][5], 0.0);
    }
}
