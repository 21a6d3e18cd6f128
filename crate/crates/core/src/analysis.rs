//! Disconnected-weight analysis, parameter tables, initialization
//! statistics and prediction agreement.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::lottery::{RunRecord, Ticket};
use crate::mask::{LayerMask, Mask};
use crate::nn::{LayerKind, Network};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Unpruned weights whose target unit (or channel, for convolutions) still
/// reaches an output through unpruned connections.
///
/// Reachability is propagated backwards from the logits. Linear layers are
/// tracked per unit and convolutions per channel; ReLU and pooling pass
/// liveness through unchanged and flatten maps channel `c` to its block of
/// features.
pub fn effective_mask(net: &Network) -> Result<Mask> {
    let mut live = vec![true; net.num_classes()];
    let mut out: Vec<Option<LayerMask>> = vec![None; net.mask().layers().len()];
    let mut pi = out.len();
    for (i, layer) in net.layers().iter().enumerate().rev() {
        let before = net.shape_before(i);
        live = match layer.kind {
            LayerKind::Linear { in_features: fan, out_features: units }
            | LayerKind::Conv2d { in_ch: fan, out_ch: units, .. } => {
                pi -= 1;
                let m = &net.mask().layers()[pi];
                let per = m.len() / (units * fan);
                let mut eff = m.clone();
                let mut up = vec![false; fan];
                for o in 0..units {
                    for j in 0..fan {
                        for t in 0..per {
                            let idx = (o * fan + j) * per + t;
                            if !m.get(idx) {
                                continue;
                            }
                            if live[o] {
                                up[j] = true;
                            } else {
                                eff.set(idx, false);
                            }
                        }
                    }
                }
                out[pi] = Some(eff);
                up
            }
            LayerKind::Relu | LayerKind::MaxPool2d { .. } => live,
            LayerKind::Flatten => {
                let channels = before[0];
                let block = live.len() / channels;
                (0..channels)
                    .map(|c| live[c * block..(c + 1) * block].iter().any(|&b| b))
                    .collect()
            }
        };
    }
    Mask::new(out.into_iter().map(|l| l.expect("every prunable layer visited")).collect())
}

fn random_batch(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid batch shape")
}

fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// True iff overwriting the flagged weights with random values never
/// changes the logits bit-for-bit. Each trial perturbs all flagged weights
/// at once; the first trial also perturbs each one on its own.
pub fn perturbation_oracle(net: &Network, flagged: &Mask, trials: usize, rng: &SeededRng) -> Result<bool> {
    net.mask().check_congruent(flagged)?;
    let mut r = rng.stream("perturbation");
    let mut shape = vec![4];
    shape.extend_from_slice(net.input_shape());
    let targets: Vec<(usize, usize)> = flagged
        .layers()
        .iter()
        .enumerate()
        .flat_map(|(l, m)| m.iter_ones().map(move |i| (l, i)))
        .collect();
    if targets.is_empty() {
        return Ok(true);
    }
    let perturbed = |net: &mut Network, which: &[(usize, usize)], r: &mut rand_chacha::ChaCha8Rng| {
        for &(l, i) in which {
            net.params_mut().layers[l].weight.data_mut()[i] = r.random_range(-3.0f32..3.0);
        }
    };
    for trial in 0..trials {
        let batch = random_batch(&shape, &mut r);
        let reference = net.forward(&batch)?;
        let mut copy = net.clone();
        perturbed(&mut copy, &targets, &mut r);
        if !same_bits(&reference, &copy.forward(&batch)?) {
            return Ok(false);
        }
        if trial == 0 {
            for t in &targets {
                let mut copy = net.clone();
                perturbed(&mut copy, std::slice::from_ref(t), &mut r);
                if !same_bits(&reference, &copy.forward(&batch)?) {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// Unpruned weights that [`effective_mask`] reports as disconnected.
pub fn disconnected(net: &Network) -> Result<Mask> {
    let eff = effective_mask(net)?;
    let layers = net
        .mask()
        .layers()
        .iter()
        .zip(eff.layers())
        .map(|(m, e)| m.zip_words(e, |a, b| a & !b))
        .collect();
    Mask::new(layers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveRow {
    pub dataset: String,
    pub method: String,
    pub seed: u64,
    pub iteration: usize,
    pub total: usize,
    pub s: usize,
    pub s_eff: usize,
}

impl EffectiveRow {
    pub fn ratio(&self) -> f64 {
        if self.s == 0 {
            1.0
        } else {
            self.s_eff as f64 / self.s as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveLayerRow {
    pub dataset: String,
    pub seed: u64,
    pub iteration: usize,
    pub layer: String,
    pub total: usize,
    pub s: usize,
    pub s_eff: usize,
}

/// Explicit (`s`) and effective (`s_eff`) unpruned counts per iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EffectiveReport {
    pub rows: Vec<EffectiveRow>,
    pub layers: Vec<EffectiveLayerRow>,
}

pub fn params_table(records: &[RunRecord]) -> EffectiveReport {
    let mut report = EffectiveReport::default();
    for r in records {
        for p in &r.points {
            report.rows.push(EffectiveRow {
                dataset: r.dataset.clone(),
                method: r.method.clone(),
                seed: r.seed,
                iteration: p.iteration,
                total: p.total,
                s: p.unpruned,
                s_eff: p.effective_unpruned,
            });
            for l in &p.layers {
                report.layers.push(EffectiveLayerRow {
                    dataset: r.dataset.clone(),
                    seed: r.seed,
                    iteration: p.iteration,
                    layer: l.name.clone(),
                    total: l.total,
                    s: l.unpruned,
                    s_eff: l.effective,
                });
            }
        }
    }
    report
}

impl EffectiveReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "# s = explicitly unpruned weights, s_eff = unpruned weights still connected to the output (counts)\n\
             dataset,method,seed,iteration,total,s,s_eff,s_eff_over_s\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{:.6}",
                r.dataset,
                r.method,
                r.seed,
                r.iteration,
                r.total,
                r.s,
                r.s_eff,
                r.ratio()
            );
        }
        s
    }

    pub fn layers_csv(&self) -> String {
        let mut s = String::from("# per-layer weight counts\ndataset,seed,iteration,layer,total,s,s_eff\n");
        for r in &self.layers {
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.dataset, r.seed, r.iteration, r.layer, r.total, r.s, r.s_eff);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitStats {
    pub layer: String,
    pub total: usize,
    pub kept: usize,
    /// Population std of the unpruned init weights; `None` if the layer is fully pruned.
    pub ticket_std: Option<f64>,
    pub full_std: f64,
}

fn population_std(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Some((values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt())
}

pub fn init_stats(ticket: &Ticket) -> Result<Vec<InitStats>> {
    ticket.init.params.check_mask(&ticket.mask)?;
    Ok(ticket
        .init
        .params
        .layers
        .iter()
        .zip(ticket.mask.layers())
        .map(|(p, m)| {
            let w = p.weight.data();
            InitStats {
                layer: p.name.clone(),
                total: m.len(),
                kept: m.count_ones(),
                ticket_std: population_std(&m.iter_ones().map(|i| w[i] as f64).collect::<Vec<_>>()),
                full_std: population_std(&w.iter().map(|&v| v as f64).collect::<Vec<_>>()).unwrap_or(0.0),
            }
        })
        .collect())
}

pub fn init_stats_csv(rows: &[(String, Vec<InitStats>)]) -> String {
    let mut s = String::from(
        "# standard deviation of initial weights: unpruned weights of the ticket vs the full layer\n\
         ticket,layer,total,kept,kept_fraction,ticket_std,full_std\n",
    );
    for (ticket, stats) in rows {
        for st in stats {
            let _ = writeln!(
                s,
                "{ticket},{},{},{},{:.6},{},{:.8}",
                st.layer,
                st.total,
                st.kept,
                st.kept as f64 / st.total as f64,
                st.ticket_std.map_or(String::new(), |v| format!("{v:.8}")),
                st.full_std
            );
        }
    }
    s
}

/// `(i, j)` = number of test examples on which nets `i` and `j` predict the same class.
pub fn prediction_agreement(nets: &[&Network], test: &Split) -> Result<Vec<Vec<usize>>> {
    if let Some(first) = nets.first() {
        if let Some(bad) = nets.iter().find(|n| n.num_classes() != first.num_classes()) {
            return Err(Error::Shape(format!(
                "class count mismatch: {} vs {}",
                first.num_classes(),
                bad.num_classes()
            )));
        }
    }
    let preds = nets
        .iter()
        .map(|n| n.predict_all(&test.images))
        .collect::<Result<Vec<_>>>()?;
    Ok(preds
        .iter()
        .map(|a| preds.iter().map(|b| a.iter().zip(b).filter(|(x, y)| x == y).count()).collect())
        .collect())
}

pub fn agreement_csv(labels: &[String], m: &[Vec<usize>], n_test: usize) -> String {
    let mut s = format!("# test examples (of {n_test}) on which both networks predict the same class\nnet");
    for l in labels {
        let _ = write!(s, ",{l}");
    }
    s.push('\n');
    for (l, row) in labels.iter().zip(m) {
        s.push_str(l);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lottery::{random_ticket, TicketKind};
    use crate::nn::{build_network, ArchId, LayerSpec};
    use crate::prune::{prune_step, PruneMethod, PruningSpec};
    use proptest::prelude::*;

    fn mlp(widths: &[usize], seed: u64) -> Network {
        build_network(&ArchId::Mlp(widths.to_vec()), &widths[..1], *widths.last().unwrap(), seed).unwrap()
    }

    #[test]
    fn unpruned_net_is_fully_effective() {
        let net = mlp(&[4, 5, 3], 0);
        assert_eq!(effective_mask(&net).unwrap(), *net.mask());
        let lenet = build_network(&ArchId::LeNet, &[1, 28, 28], 10, 0).unwrap();
        assert_eq!(effective_mask(&lenet).unwrap().count_ones(), 59_838);
    }

    #[test]
    fn dead_hidden_unit_disconnects_its_inputs() {
        // 2-2-1: cutting hidden unit 0's only outgoing weight strands both of its incoming weights.
        let layers = vec![
            LayerSpec::new("fc1", LayerKind::Linear { in_features: 2, out_features: 2 }),
            LayerSpec::new("relu1", LayerKind::Relu),
            LayerSpec::new("fc2", LayerKind::Linear { in_features: 2, out_features: 1 }),
        ];
        let mut net = Network::from_layers(layers, &[2], 3).unwrap();
        let mut mask = net.mask().clone();
        mask.layers_mut()[1].set(0, false);
        net.set_mask(mask).unwrap();
        let eff = effective_mask(&net).unwrap();
        assert_eq!(eff.count_ones(), net.mask().count_ones() - 2);
        assert_eq!(eff.layers()[0].to_bools(), vec![false, false, true, true]);
        let flagged = disconnected(&net).unwrap();
        assert_eq!(flagged.count_ones(), 2);
        assert!(perturbation_oracle(&net, &flagged, 20, &SeededRng::new(1)).unwrap());

        let mut wrong = flagged.clone();
        wrong.layers_mut()[1].set(1, true);
        assert!(!perturbation_oracle(&net, &wrong, 3, &SeededRng::new(1)).unwrap());
    }

    #[test]
    fn empty_flag_set_passes() {
        let net = mlp(&[3, 4, 2], 0);
        let none = Mask::new(net.mask().layers().iter().map(|l| LayerMask::filled(l.name(), l.shape().to_vec(), false)).collect()).unwrap();
        assert!(perturbation_oracle(&net, &none, 2, &SeededRng::new(0)).unwrap());
    }

    #[test]
    fn conv_channels_and_flatten_blocks() {
        let layers = vec![
            LayerSpec::new("conv1", LayerKind::Conv2d { in_ch: 1, out_ch: 2, kernel: 3, stride: 1, pad: 0 }),
            LayerSpec::new("relu1", LayerKind::Relu),
            LayerSpec::new("pool1", LayerKind::MaxPool2d { kernel: 2 }),
            LayerSpec::new("flatten", LayerKind::Flatten),
            LayerSpec::new("fc1", LayerKind::Linear { in_features: 8, out_features: 3 }),
        ];
        let mut net = Network::from_layers(layers, &[1, 6, 6], 0).unwrap();
        // Features 4..8 come from channel 1; cut all of them.
        let mut mask = net.mask().clone();
        for o in 0..3 {
            for f in 4..8 {
                mask.layers_mut()[1].set(o * 8 + f, false);
            }
        }
        net.set_mask(mask).unwrap();
        let eff = effective_mask(&net).unwrap();
        let conv: Vec<bool> = eff.layers()[0].to_bools();
        assert!(conv[..9].iter().all(|&b| b));
        assert!(conv[9..].iter().all(|&b| !b));
        assert_eq!(eff.layers()[1], net.mask().layers()[1]);
        assert!(perturbation_oracle(&net, &disconnected(&net).unwrap(), 5, &SeededRng::new(2)).unwrap());
    }

    #[test]
    fn structured_input_axis_pruning_strands_upstream_units() {
        let mut net = mlp(&[6, 12, 12, 4], 5);
        let mut spec = PruningSpec::new(PruneMethod::RandomStructured, 0.3);
        spec.structured_dim = 1;
        let mut total_gap = 0;
        for k in 0..3 {
            let (m, _) = prune_step(net.params(), net.mask(), &spec, &SeededRng::new(k)).unwrap();
            net.set_mask(m).unwrap();
            let eff = effective_mask(&net).unwrap();
            assert!(eff.is_subset_of(net.mask()).unwrap());
            total_gap += net.mask().count_ones() - eff.count_ones();
            assert!(perturbation_oracle(&net, &disconnected(&net).unwrap(), 4, &SeededRng::new(k)).unwrap());
        }
        assert!(total_gap > 0);
    }

    #[test]
    fn init_stats_cases() {
        let t = random_ticket(&ArchId::Mlp(vec![20, 30, 10]), &[20], 10, 0.0, 4).unwrap();
        assert_eq!(t.provenance.kind, TicketKind::Random);
        for s in init_stats(&t).unwrap() {
            assert_eq!(s.ticket_std, Some(s.full_std));
        }
        // Keep the largest-magnitude half of every layer.
        let mut big = t.clone();
        for (l, p) in big.mask.layers_mut().iter_mut().zip(&t.init.params.layers) {
            let w = p.weight.data();
            let mut order: Vec<usize> = (0..w.len()).collect();
            order.sort_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()));
            for &i in &order[..w.len() / 2] {
                l.set(i, false);
            }
        }
        for s in init_stats(&big).unwrap() {
            assert!(s.ticket_std.unwrap() > s.full_std);
        }
        let mut empty = t.clone();
        let n = empty.mask.layers()[1].len();
        for i in 0..n {
            empty.mask.layers_mut()[1].set(i, false);
        }
        assert_eq!(init_stats(&empty).unwrap()[1].ticket_std, None);
    }

    #[test]
    fn agreement_matrix_cases() {
        let a = mlp(&[4, 6, 3], 1);
        let b = mlp(&[4, 6, 3], 2);
        let images = Tensor::new(vec![7, 4], (0..28).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let test = Split::new(images, vec![0; 7]).unwrap();
        let m = prediction_agreement(&[&a, &b, &a], &test).unwrap();
        for i in 0..3 {
            assert_eq!(m[i][i], 7);
            for j in 0..3 {
                assert_eq!(m[i][j], m[j][i]);
                assert!(m[i][j] <= 7);
            }
        }
        assert_eq!(m[0][2], 7);
        let c = mlp(&[4, 6, 2], 1);
        assert!(prediction_agreement(&[&a, &c], &test).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn unstructured_mlp_pruning_keeps_every_live_unit_effective(seed in 0u64..1000, rate in 0.05f64..0.5) {
            let mut net = mlp(&[5, 8, 6, 3], seed);
            let spec = PruningSpec::new(PruneMethod::RandomUnstructured, rate);
            let (m, _) = prune_step(net.params(), net.mask(), &spec, &SeededRng::new(seed)).unwrap();
            net.set_mask(m).unwrap();
            let eff = effective_mask(&net).unwrap();
            prop_assert!(eff.count_ones() <= net.mask().count_ones());
            prop_assert!(perturbation_oracle(&net, &disconnected(&net).unwrap(), 2, &SeededRng::new(seed)).unwrap());
        }
    }
}
