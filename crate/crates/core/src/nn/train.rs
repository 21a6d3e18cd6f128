use serde::{Deserialize, Serialize};

use super::network::Network;
use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.01,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

/// Plain SGD on softmax cross-entropy with the network's mask held fixed.
///
/// Epoch numbering continues from `first_epoch` so that repeated calls on
/// the same network draw fresh data orders.
pub fn train(net: &mut Network, data: &DatasetHandle, opts: &TrainOptions, rng: &SeededRng) -> Result<TrainLog> {
    train_from(net, data, opts, rng, 0)
}

pub fn train_from(
    net: &mut Network,
    data: &DatasetHandle,
    opts: &TrainOptions,
    rng: &SeededRng,
    first_epoch: usize,
) -> Result<TrainLog> {
    if opts.epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be >= 1".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if !opts.lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate {} is not finite", opts.lr)));
    }
    if data.example_shape() != net.input_shape() {
        return Err(Error::Shape(format!(
            "dataset `{}` examples {:?} do not fit network input {:?}",
            data.name,
            data.example_shape(),
            net.input_shape()
        )));
    }
    if data.num_classes > net.num_classes() {
        return Err(Error::Shape(format!(
            "dataset `{}` has {} classes, network has {}",
            data.name,
            data.num_classes,
            net.num_classes()
        )));
    }
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for e in 0..opts.epochs {
        let epoch = first_epoch + e;
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        for (x, y) in data.batches(opts.batch_size, epoch, rng) {
            let (loss, grads) = net.loss_and_grads(&x, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            if opts.lr != 0.0 {
                net.apply_sgd(&grads, opts.lr);
            }
            loss_sum += loss * y.len() as f64;
            seen += y.len();
            step += 1;
        }
        let val_accuracy = if data.val.is_empty() {
            None
        } else {
            Some(net.accuracy(&data.val.images, &data.val.labels)?)
        };
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_accuracy,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, DatasetHandle};
    use crate::nn::{build_network, ArchId};

    fn blobs() -> DatasetHandle {
        DatasetHandle::from_raw(synth_blobs(2, 25, &[2], 6.0, 11).unwrap(), 0, false).unwrap()
    }

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let data = blobs();
        let mut net = build_network(&ArchId::Mlp(vec![2, 8, 2]), &[2], 2, 0).unwrap();
        let before = net.params().clone();
        let opts = TrainOptions { epochs: 2, lr: 0.0, batch_size: 4 };
        train(&mut net, &data, &opts, &SeededRng::new(0)).unwrap();
        assert_eq!(net.params(), &before);
    }

    #[test]
    fn pruned_weights_never_move() {
        let data = blobs();
        let mut net = build_network(&ArchId::Mlp(vec![2, 8, 2]), &[2], 2, 0).unwrap();
        let mut mask = net.mask().clone();
        for i in [0usize, 3, 7, 11] {
            mask.layers_mut()[0].set(i, false);
        }
        net.set_mask(mask).unwrap();
        let before = net.params().clone();
        train(&mut net, &data, &TrainOptions { epochs: 3, lr: 0.1, batch_size: 4 }, &SeededRng::new(0)).unwrap();
        for i in [0usize, 3, 7, 11] {
            assert_eq!(net.params().layers[0].weight.data()[i], before.layers[0].weight.data()[i]);
        }
        assert_ne!(net.params(), &before);
    }

    #[test]
    fn rejects_bad_options() {
        let data = blobs();
        let mut net = build_network(&ArchId::Mlp(vec![2, 8, 2]), &[2], 2, 0).unwrap();
        let rng = SeededRng::new(0);
        assert!(train(&mut net, &data, &TrainOptions { epochs: 0, ..Default::default() }, &rng).is_err());
        let mut wrong = build_network(&ArchId::Mlp(vec![3, 2]), &[3], 2, 0).unwrap();
        assert!(train(&mut wrong, &data, &TrainOptions::default(), &rng).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let data = blobs();
        let mut net = build_network(&ArchId::Mlp(vec![2, 8, 2]), &[2], 2, 0).unwrap();
        let err = train(&mut net, &data, &TrainOptions { epochs: 5, lr: 1e30, batch_size: 4 }, &SeededRng::new(0))
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    }
}
