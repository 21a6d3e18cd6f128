//! The seven pruning rules as pure functions `(params, mask) -> mask`.
//!
//! Every rule only looks at currently unpruned entries, removes
//! `round_half_up(rate * remaining)` entries (or channels) per scope, and
//! returns a mask that is a subset of the input mask. Magnitude ties are
//! broken by the lowest flat index.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{LayerMask, Mask};
use crate::nn::ParamSet;
use crate::rng::{labels, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "&'static str")]
pub enum PruneMethod {
    L1Unstructured,
    GlobalUnstructured,
    L1Structured,
    L2Structured,
    LInfStructured,
    RandomStructured,
    RandomUnstructured,
}

impl PruneMethod {
    pub const ALL: [PruneMethod; 7] = [
        PruneMethod::L1Unstructured,
        PruneMethod::GlobalUnstructured,
        PruneMethod::L1Structured,
        PruneMethod::L2Structured,
        PruneMethod::LInfStructured,
        PruneMethod::RandomStructured,
        PruneMethod::RandomUnstructured,
    ];

    pub fn is_structured(self) -> bool {
        matches!(
            self,
            PruneMethod::L1Structured
                | PruneMethod::L2Structured
                | PruneMethod::LInfStructured
                | PruneMethod::RandomStructured
        )
    }

    pub fn is_random(self) -> bool {
        matches!(self, PruneMethod::RandomStructured | PruneMethod::RandomUnstructured)
    }

    pub fn name(self) -> &'static str {
        match self {
            PruneMethod::L1Unstructured => "l1_unstructured",
            PruneMethod::GlobalUnstructured => "global_unstructured",
            PruneMethod::L1Structured => "l1_structured",
            PruneMethod::L2Structured => "l2_structured",
            PruneMethod::LInfStructured => "linf_structured",
            PruneMethod::RandomStructured => "random_structured",
            PruneMethod::RandomUnstructured => "random_unstructured",
        }
    }
}

impl fmt::Display for PruneMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PruneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PruneMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown pruning method `{s}`")))
    }
}

impl TryFrom<String> for PruneMethod {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PruneMethod> for &'static str {
    fn from(m: PruneMethod) -> &'static str {
        m.name()
    }
}

/// Which layers global pruning pools together.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalScope {
    #[default]
    AllLayers,
    /// Conv weights and linear weights form two separate pools.
    SameKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningSpec {
    pub method: PruneMethod,
    #[serde(default = "default_rate")]
    pub rate: f64,
    /// Channel axis for structured methods; `0` is the output axis.
    #[serde(default)]
    pub structured_dim: usize,
    #[serde(default)]
    pub global_scope: GlobalScope,
    #[serde(default = "default_label")]
    pub rng_label: String,
}

fn default_rate() -> f64 {
    0.2
}

fn default_label() -> String {
    labels::PRUNING.to_string()
}

impl PruningSpec {
    pub fn new(method: PruneMethod, rate: f64) -> Self {
        Self {
            method,
            rate,
            structured_dim: 0,
            global_scope: GlobalScope::AllLayers,
            rng_label: default_label(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::InvalidArgument(format!("pruning rate {} not in (0, 1)", self.rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub previously_pruned: usize,
    pub newly_pruned: usize,
    pub remaining: usize,
}

impl LayerReport {
    pub fn total(&self) -> usize {
        self.previously_pruned + self.newly_pruned + self.remaining
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneReport {
    pub layers: Vec<LayerReport>,
}

impl PruneReport {
    pub fn newly_pruned(&self) -> usize {
        self.layers.iter().map(|l| l.newly_pruned).sum()
    }

    pub fn remaining(&self) -> usize {
        self.layers.iter().map(|l| l.remaining).sum()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(LayerReport::total).sum()
    }
}

/// `round_half_up(rate * n)`, robust to the product landing a hair under `.5`.
pub fn prune_count(rate: f64, n: usize) -> usize {
    let raw = rate * n as f64;
    ((raw + 0.5 + 1e-9).floor() as usize).min(n)
}

/// Applies one pruning step.
pub fn prune_step(params: &ParamSet, mask: &Mask, spec: &PruningSpec, rng: &SeededRng) -> Result<(Mask, PruneReport)> {
    spec.validate()?;
    params.check_mask(mask)?;
    let mut out = mask.clone();
    match spec.method {
        PruneMethod::L1Unstructured | PruneMethod::RandomUnstructured => {
            for (p, m) in params.layers.iter().zip(out.layers_mut()) {
                let candidates: Vec<usize> = m.iter_ones().collect();
                if candidates.is_empty() {
                    return Err(Error::EmptyScope(format!("layer `{}` is fully pruned", p.name)));
                }
                let n = prune_count(spec.rate, candidates.len());
                let chosen = if spec.method == PruneMethod::RandomUnstructured {
                    let mut c = candidates;
                    c.shuffle(&mut rng.stream(&format!("{}/{}", spec.rng_label, p.name)));
                    c.truncate(n);
                    c
                } else {
                    let w = p.weight.data();
                    smallest(candidates, n, |i| w[i].abs())
                };
                for i in chosen {
                    m.set(i, false);
                }
            }
        }
        PruneMethod::GlobalUnstructured => {
            let pools: Vec<Vec<usize>> = match spec.global_scope {
                GlobalScope::AllLayers => vec![(0..params.layers.len()).collect()],
                GlobalScope::SameKind => {
                    let (conv, lin): (Vec<usize>, Vec<usize>) =
                        (0..params.layers.len()).partition(|&l| params.layers[l].is_conv());
                    [conv, lin].into_iter().filter(|p| !p.is_empty()).collect()
                }
            };
            for pool in pools {
                let mut candidates: Vec<(usize, usize)> = Vec::new();
                for &l in &pool {
                    candidates.extend(out.layers()[l].iter_ones().map(|i| (l, i)));
                }
                if candidates.is_empty() {
                    return Err(Error::EmptyScope("no unpruned weights left in the global pool".into()));
                }
                let n = prune_count(spec.rate, candidates.len());
                let chosen = smallest(candidates, n, |(l, i)| params.layers[l].weight.data()[i].abs());
                for (l, i) in chosen {
                    out.layers_mut()[l].set(i, false);
                }
            }
        }
        PruneMethod::L1Structured
        | PruneMethod::L2Structured
        | PruneMethod::LInfStructured
        | PruneMethod::RandomStructured => {
            for (p, m) in params.layers.iter().zip(out.layers_mut()) {
                let shape = p.weight.shape().to_vec();
                if shape.len() < 2 {
                    return Err(Error::StructuredRank {
                        layer: p.name.clone(),
                        rank: shape.len(),
                    });
                }
                let dim = spec.structured_dim;
                if dim >= shape.len() {
                    return Err(Error::InvalidArgument(format!(
                        "structured_dim {dim} out of range for `{}` {shape:?}",
                        p.name
                    )));
                }
                let channels = ChannelView::new(&shape, dim);
                let w = p.weight.data();
                let live: Vec<usize> = (0..channels.count)
                    .filter(|&c| channels.indices(c).any(|i| m.get(i)))
                    .collect();
                if live.is_empty() {
                    return Err(Error::EmptyScope(format!("layer `{}` has no unpruned channel", p.name)));
                }
                let n = prune_count(spec.rate, live.len());
                let chosen = if spec.method == PruneMethod::RandomStructured {
                    let mut c = live;
                    c.shuffle(&mut rng.stream(&format!("{}/{}", spec.rng_label, p.name)));
                    c.truncate(n);
                    c
                } else {
                    let norm = |c: usize| -> f64 {
                        let vals = channels.indices(c).filter(|&i| m.get(i)).map(|i| w[i].abs() as f64);
                        match spec.method {
                            PruneMethod::L1Structured => vals.sum(),
                            PruneMethod::L2Structured => vals.map(|v| v * v).sum::<f64>().sqrt(),
                            _ => vals.fold(0.0, f64::max),
                        }
                    };
                    let norms: Vec<f64> = (0..channels.count).map(norm).collect();
                    smallest(live, n, |c| norms[c])
                };
                for c in chosen {
                    for i in channels.indices(c) {
                        m.set(i, false);
                    }
                }
            }
        }
    }
    let layers = params
        .layers
        .iter()
        .zip(mask.layers().iter().zip(out.layers()))
        .map(|(p, (old, new))| layer_report(&p.name, old, new))
        .collect();
    Ok((out, PruneReport { layers }))
}

fn layer_report(name: &str, old: &LayerMask, new: &LayerMask) -> LayerReport {
    let before = old.count_ones();
    let after = new.count_ones();
    LayerReport {
        name: name.to_string(),
        previously_pruned: old.len() - before,
        newly_pruned: before - after,
        remaining: after,
    }
}

/// The `n` candidates with the smallest key; ties go to the earlier candidate.
fn smallest<T: Copy, K: PartialOrd + Copy>(mut candidates: Vec<T>, n: usize, key: impl Fn(T) -> K) -> Vec<T> {
    // Candidates arrive in ascending flat-index order, so a stable sort
    // preserves index order among equal keys.
    candidates.sort_by(|&a, &b| key(a).partial_cmp(&key(b)).unwrap_or(Ordering::Equal));
    candidates.truncate(n);
    candidates
}

/// Flat indices belonging to each slice along one axis of a row-major tensor.
#[derive(Debug, Clone, Copy)]
pub struct ChannelView {
    pub count: usize,
    outer: usize,
    inner: usize,
}

impl ChannelView {
    pub fn new(shape: &[usize], dim: usize) -> Self {
        Self {
            count: shape[dim],
            outer: shape[..dim].iter().product(),
            inner: shape[dim + 1..].iter().product(),
        }
    }

    pub fn indices(&self, c: usize) -> impl Iterator<Item = usize> + '_ {
        let (count, inner) = (self.count, self.inner);
        (0..self.outer).flat_map(move |o| {
            let start = (o * count + c) * inner;
            start..start + inner
        })
    }
}

/// Per-layer and total fraction of pruned weights.
pub fn sparsity(mask: &Mask) -> (Vec<f64>, f64) {
    let per_layer = mask
        .layers()
        .iter()
        .map(|l| l.count_zeros() as f64 / l.len() as f64)
        .collect();
    let total = if mask.is_empty() {
        0.0
    } else {
        mask.count_zeros() as f64 / mask.len() as f64
    };
    (per_layer, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerParams;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn linear(name: &str, rows: usize, w: Vec<f32>) -> LayerParams {
        let cols = w.len() / rows;
        LayerParams {
            name: name.into(),
            weight: Tensor::new(vec![rows, cols], w).unwrap(),
            bias: Tensor::zeros(vec![rows]).unwrap(),
        }
    }

    fn run(params: &ParamSet, mask: &Mask, method: PruneMethod, rate: f64) -> (Mask, PruneReport) {
        prune_step(params, mask, &PruningSpec::new(method, rate), &SeededRng::new(0)).unwrap()
    }

    #[test]
    fn l1_unstructured_hand_case() {
        let params = ParamSet::new(vec![linear("w", 1, vec![0.5, -0.1, 0.3, -0.7, 0.2])]);
        let (m, rep) = run(&params, &params.all_ones_mask(), PruneMethod::L1Unstructured, 0.4);
        assert_eq!(m.layers()[0].to_bools(), vec![true, false, true, true, false]);
        assert_eq!(rep.newly_pruned(), 2);
    }

    #[test]
    fn global_unstructured_hand_case() {
        let params = ParamSet::new(vec![linear("a", 1, vec![0.9, 0.05]), linear("b", 1, vec![0.2, 0.01])]);
        let (m, _) = run(&params, &params.all_ones_mask(), PruneMethod::GlobalUnstructured, 0.5);
        assert_eq!(m.layers()[0].to_bools(), vec![true, false]);
        assert_eq!(m.layers()[1].to_bools(), vec![true, false]);
    }

    #[test]
    fn l2_structured_hand_case() {
        let params = ParamSet::new(vec![linear("w", 2, vec![3.0, 4.0, 1.0, 1.0])]);
        let (m, _) = run(&params, &params.all_ones_mask(), PruneMethod::L2Structured, 0.5);
        assert_eq!(m.layers()[0].to_bools(), vec![true, true, false, false]);
    }

    #[test]
    fn structured_norms_ignore_pruned_entries() {
        // Channel 0 looks big only through an already-pruned entry.
        let params = ParamSet::new(vec![linear("w", 2, vec![100.0, 0.1, 1.0, 1.0])]);
        let mut mask = params.all_ones_mask();
        mask.layers_mut()[0].set(0, false);
        for method in [PruneMethod::L1Structured, PruneMethod::L2Structured, PruneMethod::LInfStructured] {
            let (m, _) = run(&params, &mask, method, 0.5);
            assert_eq!(m.layers()[0].to_bools(), vec![false, false, true, true], "{method}");
        }
    }

    #[test]
    fn input_axis_structured() {
        let params = ParamSet::new(vec![linear("w", 2, vec![3.0, 0.1, 4.0, 0.1])]);
        let mut spec = PruningSpec::new(PruneMethod::L1Structured, 0.5);
        spec.structured_dim = 1;
        let (m, _) = prune_step(&params, &params.all_ones_mask(), &spec, &SeededRng::new(0)).unwrap();
        assert_eq!(m.layers()[0].to_bools(), vec![true, false, true, false]);
    }

    #[test]
    fn twenty_percent_of_hundred() {
        let w: Vec<f32> = (0..100).map(|i| ((i * 37) % 100) as f32 / 100.0 - 0.5).collect();
        let params = ParamSet::new(vec![linear("w", 10, w)]);
        for method in PruneMethod::ALL {
            if method.is_structured() {
                continue;
            }
            let (_, rep) = run(&params, &params.all_ones_mask(), method, 0.2);
            assert_eq!(rep.newly_pruned(), 20, "{method}");
        }
        // Structured: 10 channels -> 2 channels of 10 entries.
        for method in PruneMethod::ALL.into_iter().filter(|m| m.is_structured()) {
            let (_, rep) = run(&params, &params.all_ones_mask(), method, 0.2);
            assert_eq!(rep.newly_pruned(), 20, "{method}");
        }
    }

    #[test]
    fn error_paths() {
        let rank1 = ParamSet::new(vec![LayerParams {
            name: "v".into(),
            weight: Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(),
            bias: Tensor::zeros(vec![3]).unwrap(),
        }]);
        let err = prune_step(&rank1, &rank1.all_ones_mask(), &PruningSpec::new(PruneMethod::L2Structured, 0.2), &SeededRng::new(0));
        assert!(matches!(err, Err(Error::StructuredRank { .. })));

        let params = ParamSet::new(vec![linear("w", 1, vec![1.0, 2.0])]);
        let empty = Mask::new(vec![LayerMask::filled("w", vec![1, 2], false)]).unwrap();
        for method in PruneMethod::ALL {
            let r = prune_step(&params, &empty, &PruningSpec::new(method, 0.2), &SeededRng::new(0));
            assert!(matches!(r, Err(Error::EmptyScope(_))), "{method}");
        }
        assert!(prune_step(&params, &params.all_ones_mask(), &PruningSpec::new(PruneMethod::L1Unstructured, 1.0), &SeededRng::new(0)).is_err());
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(prune_count(0.5, 3), 2);
        assert_eq!(prune_count(0.1, 5), 1);
        assert_eq!(prune_count(0.2, 2), 0);
        assert_eq!(prune_count(0.2, 13), 3);
        assert_eq!(prune_count(0.2, 12), 2);
    }

    #[test]
    fn sparsity_of_all_ones_is_zero() {
        let params = ParamSet::new(vec![linear("w", 2, vec![1.0; 6])]);
        assert_eq!(sparsity(&params.all_ones_mask()), (vec![0.0], 0.0));
    }

    fn arb_params() -> impl Strategy<Value = (ParamSet, Vec<bool>)> {
        (1usize..6, 2usize..9).prop_flat_map(|(rows, cols)| {
            (
                prop::collection::vec(-1.0f32..1.0, rows * cols),
                prop::collection::vec(prop::bool::weighted(0.8), rows * cols),
            )
                .prop_map(move |(w, keep)| (ParamSet::new(vec![linear("w", rows, w)]), keep))
        })
    }

    proptest! {
        #[test]
        fn monotone_and_exact_count((params, keep) in arb_params(), rate in 0.05f64..0.95, m in 0usize..7) {
            let method = PruneMethod::ALL[m];
            let shape = params.layers[0].weight.shape().to_vec();
            let mut bits = keep;
            bits[0] = true;
            let mask = Mask::new(vec![LayerMask::from_bools("w", shape.clone(), &bits).unwrap()]).unwrap();
            let (new, rep) = run(&params, &mask, method, rate);
            prop_assert!(new.is_subset_of(&mask).unwrap());
            let l = &rep.layers[0];
            prop_assert_eq!(l.total(), mask.len());
            if method.is_structured() {
                let view = ChannelView::new(&shape, 0);
                let live = (0..view.count).filter(|&c| view.indices(c).any(|i| bits[i])).count();
                let live_after = (0..view.count).filter(|&c| view.indices(c).any(|i| new.layers()[0].get(i))).count();
                prop_assert_eq!(live - live_after, prune_count(rate, live));
            } else {
                prop_assert_eq!(l.newly_pruned, prune_count(rate, mask.count_ones()));
            }
        }

        #[test]
        fn random_methods_ignore_weight_values((params, _) in arb_params(), scale in 0.1f32..10.0, structured in any::<bool>()) {
            let method = if structured { PruneMethod::RandomStructured } else { PruneMethod::RandomUnstructured };
            let mut other = params.clone();
            other.layers[0].weight.data_mut().iter_mut().enumerate().for_each(|(i, w)| *w = *w * scale + i as f32);
            let mask = params.all_ones_mask();
            prop_assert_eq!(run(&params, &mask, method, 0.3).0, run(&other, &mask, method, 0.3).0);
        }
    }
}
