//! Ticket sourcing and evaluation.
//!
//! A bespoke ticket comes from iterative pruning on one task: train for `E`
//! epochs, prune, then either rewind the unpruned weights (and biases) to
//! their initial values or keep training from where they are, `T` times.
//! A prêt-à-porter ticket is the thresholded consensus of bespoke masks
//! sourced from one shared initialization on `N` tasks.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::algebra::{consensus, threshold_mask, ConsensusMap};
use crate::analysis::effective_mask;
use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::mask::{LayerMask, Mask};
use crate::nn::{build_network, train_from, ArchId, Network, ParamSet, ParamSnapshot, TrainOptions};
use crate::pool::parallel_map;
use crate::prune::{prune_count, prune_step, PruneMethod, PruningSpec};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightHandling {
    /// Restore unpruned weights and all biases to their epoch-0 values.
    Rewind,
    /// Keep the trained values.
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TicketConfig {
    pub iterations: usize,
    pub epochs: usize,
    pub pruning: PruningSpec,
    pub handling: WeightHandling,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Train once more on the final mask so the trajectory ends with an
    /// accuracy at the final sparsity.
    #[serde(default)]
    pub final_round: bool,
}

impl TicketConfig {
    pub fn new(iterations: usize, epochs: usize, pruning: PruningSpec, seed: u64) -> Self {
        Self {
            iterations,
            epochs,
            pruning,
            handling: WeightHandling::Rewind,
            lr: 0.01,
            batch_size: 32,
            seed,
            final_round: false,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("iterations and epochs must be >= 1".into()));
        }
        self.pruning.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketKind {
    Bespoke,
    PretAPorter,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: TicketKind,
    pub sources: Vec<String>,
    pub method: String,
    pub rate: f64,
    pub iterations: usize,
    pub seed: u64,
    pub arch: ArchId,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub sparsity: f64,
    #[serde(default)]
    pub handling: Option<WeightHandling>,
    #[serde(default)]
    pub tau: Option<usize>,
    pub init_epoch_tag: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ticket {
    pub mask: Mask,
    pub init: ParamSnapshot,
    pub provenance: Provenance,
}

pub const MASK_FILE: &str = "mask.ltmk";
pub const INIT_FILE: &str = "init.ltpc";
pub const PROVENANCE_FILE: &str = "provenance.json";

impl Ticket {
    pub fn sparsity(&self) -> f64 {
        self.mask.count_zeros() as f64 / self.mask.len() as f64
    }

    /// Network with the ticket's mask applied to its initialization.
    pub fn network(&self) -> Result<Network> {
        let p = &self.provenance;
        let mut net = Network::from_params(&p.arch, &p.input_shape, p.num_classes, self.init.params.clone())?;
        net.set_mask(self.mask.clone())?;
        Ok(net)
    }

    /// Writes the ticket bundle: mask file, init checkpoint and provenance JSON.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.mask.save(dir.join(MASK_FILE))?;
        self.init.params.save(dir.join(INIT_FILE))?;
        let json = serde_json::to_string_pretty(&self.provenance)?;
        std::fs::write(dir.join(PROVENANCE_FILE), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Ticket> {
        let dir = dir.as_ref();
        let mask = Mask::load(dir.join(MASK_FILE))?;
        let params = ParamSet::load(dir.join(INIT_FILE))?;
        let provenance: Provenance = serde_json::from_slice(&std::fs::read(dir.join(PROVENANCE_FILE))?)?;
        params.check_mask(&mask)?;
        Ok(Ticket {
            mask,
            init: ParamSnapshot {
                params,
                epoch_tag: provenance.init_epoch_tag,
            },
            provenance,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    pub name: String,
    pub total: usize,
    pub unpruned: usize,
    pub effective: usize,
}

/// State of one pruning iteration: the mask in force during the
/// training round and the accuracy reached with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationPoint {
    pub iteration: usize,
    pub total: usize,
    pub unpruned: usize,
    pub effective_unpruned: usize,
    pub sparsity: f64,
    pub effective_sparsity: f64,
    pub test_accuracy: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub layers: Vec<LayerCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub method: String,
    pub seed: u64,
    pub points: Vec<IterationPoint>,
    /// Mask after each pruning step.
    #[serde(skip)]
    pub masks: Vec<Mask>,
    #[serde(skip)]
    pub elapsed_ms: u128,
}

impl RunRecord {
    /// Accuracy-sparsity trajectory CSV.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# dataset={} method={} seed={}; sparsity = fraction of weights pruned; accuracy = test fraction correct\n",
            self.dataset, self.method, self.seed
        );
        s.push_str("iteration,unpruned,effective_unpruned,total,sparsity,effective_sparsity,test_accuracy,val_accuracy\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{},{}\n",
                p.iteration,
                p.unpruned,
                p.effective_unpruned,
                p.total,
                p.sparsity,
                p.effective_sparsity,
                opt(p.test_accuracy),
                opt(p.val_accuracy)
            ));
        }
        s
    }
}

fn point(net: &Network, iteration: usize, test: Option<f64>, val: Option<f64>) -> Result<IterationPoint> {
    let eff = effective_mask(net)?;
    let layers: Vec<LayerCount> = net
        .mask()
        .layers()
        .iter()
        .zip(eff.layers())
        .map(|(m, e)| LayerCount {
            name: m.name().to_string(),
            total: m.len(),
            unpruned: m.count_ones(),
            effective: e.count_ones(),
        })
        .collect();
    let total = net.mask().len();
    let unpruned = net.mask().count_ones();
    let effective_unpruned = eff.count_ones();
    Ok(IterationPoint {
        iteration,
        total,
        unpruned,
        effective_unpruned,
        sparsity: 1.0 - unpruned as f64 / total as f64,
        effective_sparsity: 1.0 - effective_unpruned as f64 / total as f64,
        test_accuracy: test,
        val_accuracy: val,
        layers,
    })
}

fn test_accuracy(net: &Network, data: &DatasetHandle) -> Result<Option<f64>> {
    if data.test.is_empty() {
        return Ok(None);
    }
    net.accuracy(&data.test.images, &data.test.labels).map(Some)
}

pub fn source_bespoke(dataset: &DatasetHandle, arch: &ArchId, cfg: &TicketConfig) -> Result<(Ticket, RunRecord)> {
    source_bespoke_observed(dataset, arch, cfg, |_, _| {})
}

/// [`source_bespoke`] with a hook called at the start of every pruning
/// iteration with the network about to be trained.
pub fn source_bespoke_observed(
    dataset: &DatasetHandle,
    arch: &ArchId,
    cfg: &TicketConfig,
    mut observe: impl FnMut(usize, &Network),
) -> Result<(Ticket, RunRecord)> {
    cfg.validate()?;
    let started = Instant::now();
    let mut net = build_network(arch, dataset.example_shape(), dataset.num_classes, cfg.seed)?;
    let init = net.init_snapshot().clone();
    let root = SeededRng::new(cfg.seed);
    let opts = cfg.train_options();
    let mut points = Vec::with_capacity(cfg.iterations + 1);
    let mut masks = Vec::with_capacity(cfg.iterations);
    let mut epoch = 0;
    for k in 0..cfg.iterations {
        observe(k, &net);
        let log = train_from(&mut net, dataset, &opts, &root.derive("train"), epoch)?;
        epoch += cfg.epochs;
        let val = log.epochs.last().and_then(|e| e.val_accuracy);
        points.push(point(&net, k, test_accuracy(&net, dataset)?, val)?);
        let (mask, _) = prune_step(net.params(), net.mask(), &cfg.pruning, &root.derive(&format!("prune/{k}")))?;
        net.set_mask(mask.clone())?;
        if cfg.handling == WeightHandling::Rewind {
            net.rewind(&init)?;
        }
        masks.push(mask);
    }
    observe(cfg.iterations, &net);
    let (test, val) = if cfg.final_round {
        let log = train_from(&mut net, dataset, &opts, &root.derive("train"), epoch)?;
        (test_accuracy(&net, dataset)?, log.epochs.last().and_then(|e| e.val_accuracy))
    } else {
        (None, None)
    };
    points.push(point(&net, cfg.iterations, test, val)?);

    let mask = net.mask().clone();
    let ticket = Ticket {
        provenance: Provenance {
            kind: TicketKind::Bespoke,
            sources: vec![dataset.name.clone()],
            method: cfg.pruning.method.name().to_string(),
            rate: cfg.pruning.rate,
            iterations: cfg.iterations,
            seed: cfg.seed,
            arch: arch.clone(),
            input_shape: dataset.example_shape().to_vec(),
            num_classes: dataset.num_classes,
            sparsity: mask.count_zeros() as f64 / mask.len() as f64,
            handling: Some(cfg.handling),
            tau: None,
            init_epoch_tag: init.epoch_tag,
        },
        mask,
        init,
    };
    let record = RunRecord {
        dataset: dataset.name.clone(),
        method: cfg.pruning.method.name().to_string(),
        seed: cfg.seed,
        points,
        masks,
        elapsed_ms: started.elapsed().as_millis(),
    };
    Ok((ticket, record))
}

#[derive(Debug, Clone)]
pub struct PretAPorter {
    pub ticket: Ticket,
    pub bespoke: Vec<(Ticket, RunRecord)>,
    pub consensus: ConsensusMap,
}

/// Sources one bespoke ticket per dataset (up to `jobs` at a time) from a
/// shared initialization and keeps weights unpruned in at least `tau` of
/// them (`None` = all, i.e. the intersection).
pub fn pret_a_porter(
    datasets: &[DatasetHandle],
    arch: &ArchId,
    cfg: &TicketConfig,
    tau: Option<usize>,
    jobs: usize,
) -> Result<PretAPorter> {
    let Some(first) = datasets.first() else {
        return Err(Error::InvalidArgument("prêt-à-porter needs at least one dataset".into()));
    };
    for d in &datasets[1..] {
        if d.example_shape() != first.example_shape() || d.num_classes != first.num_classes {
            return Err(Error::Shape(format!(
                "dataset `{}` ({:?}, {} classes) is incompatible with `{}` ({:?}, {} classes)",
                d.name,
                d.example_shape(),
                d.num_classes,
                first.name,
                first.example_shape(),
                first.num_classes
            )));
        }
    }
    if tau.is_some_and(|t| t == 0 || t > datasets.len()) {
        return Err(Error::InvalidArgument(format!("threshold {tau:?} outside 1..={}", datasets.len())));
    }
    let bespoke = parallel_map(datasets, jobs, |_, d| source_bespoke(d, arch, cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let tickets: Vec<Ticket> = bespoke.iter().map(|(t, _)| t.clone()).collect();
    let (ticket, consensus) = combine_tickets(&tickets, tau)?;
    Ok(PretAPorter {
        ticket,
        bespoke,
        consensus,
    })
}

/// Consensus of bespoke tickets sharing one initialization: weights
/// unpruned in at least `tau` of them (`None` = all).
pub fn combine_tickets(tickets: &[Ticket], tau: Option<usize>) -> Result<(Ticket, ConsensusMap)> {
    let Some(first) = tickets.first() else {
        return Err(Error::InvalidArgument("no tickets to combine".into()));
    };
    let tau = tau.unwrap_or(tickets.len());
    if tau == 0 || tau > tickets.len() {
        return Err(Error::InvalidArgument(format!("threshold {tau} outside 1..={}", tickets.len())));
    }
    if let Some(t) = tickets.iter().find(|t| t.init != first.init) {
        return Err(Error::Incongruent(format!(
            "ticket from {:?} has a different initialization than {:?}",
            t.provenance.sources, first.provenance.sources
        )));
    }
    let masks: Vec<Mask> = tickets.iter().map(|t| t.mask.clone()).collect();
    let cmap = consensus(&masks)?;
    let mask = threshold_mask(&cmap, tau)?;
    let p = &first.provenance;
    let ticket = Ticket {
        provenance: Provenance {
            kind: TicketKind::PretAPorter,
            sources: tickets.iter().flat_map(|t| t.provenance.sources.clone()).collect(),
            tau: Some(tau),
            sparsity: mask.count_zeros() as f64 / mask.len() as f64,
            ..p.clone()
        },
        mask,
        init: first.init.clone(),
    };
    Ok((ticket, cmap))
}

/// Uniform random mask with `round(target_sparsity * D)` pruned weights
/// over the whole network, on a fresh initialization from `seed`.
pub fn random_ticket(
    arch: &ArchId,
    input_shape: &[usize],
    num_classes: usize,
    target_sparsity: f64,
    seed: u64,
) -> Result<Ticket> {
    if !(0.0..1.0).contains(&target_sparsity) {
        return Err(Error::InvalidArgument(format!(
            "target sparsity {target_sparsity} not in [0, 1)"
        )));
    }
    let net = build_network(arch, input_shape, num_classes, seed)?;
    let sizes: Vec<(String, Vec<usize>, usize)> = net
        .mask()
        .layers()
        .iter()
        .map(|l| (l.name().to_string(), l.shape().to_vec(), l.len()))
        .collect();
    let total: usize = sizes.iter().map(|s| s.2).sum();
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut SeededRng::new(seed).stream("random-ticket"));
    let pruned = prune_count(target_sparsity, total);
    let mut bits = vec![true; total];
    for &i in &order[..pruned] {
        bits[i] = false;
    }
    let mut layers = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for (name, shape, len) in sizes {
        layers.push(LayerMask::from_bools(name, shape, &bits[offset..offset + len])?);
        offset += len;
    }
    let mask = Mask::new(layers)?;
    let init = net.init_snapshot().clone();
    Ok(Ticket {
        provenance: Provenance {
            kind: TicketKind::Random,
            sources: Vec::new(),
            method: PruneMethod::RandomUnstructured.name().to_string(),
            rate: target_sparsity,
            iterations: 0,
            seed,
            arch: arch.clone(),
            input_shape: input_shape.to_vec(),
            num_classes,
            sparsity: mask.count_zeros() as f64 / mask.len() as f64,
            handling: None,
            tau: None,
            init_epoch_tag: init.epoch_tag,
        },
        mask,
        init,
    })
}

fn check_target(ticket: &Ticket, data: &DatasetHandle) -> Result<()> {
    let p = &ticket.provenance;
    if data.example_shape() != p.input_shape.as_slice() || data.num_classes > p.num_classes {
        return Err(Error::Shape(format!(
            "dataset `{}` ({:?}, {} classes) does not fit ticket ({:?}, {} classes)",
            data.name,
            data.example_shape(),
            data.num_classes,
            p.input_shape,
            p.num_classes
        )));
    }
    Ok(())
}

/// Trains the ticket from its initialization on `target` and returns the
/// test accuracy.
pub fn retrain(ticket: &Ticket, target: &DatasetHandle, opts: &TrainOptions, seed: u64) -> Result<f64> {
    check_target(ticket, target)?;
    let mut net = ticket.network()?;
    train_from(&mut net, target, opts, &SeededRng::new(seed).derive("retrain"), 0)?;
    net.accuracy(&target.test.images, &target.test.labels)
}

/// Test accuracy of the masked initialization, without training.
pub fn eval_at_init(ticket: &Ticket, dataset: &DatasetHandle) -> Result<f64> {
    check_target(ticket, dataset)?;
    ticket.network()?.accuracy(&dataset.test.images, &dataset.test.labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::jaccard_distance;
    use crate::data::synth_blobs;

    fn blobs(seed: u64) -> DatasetHandle {
        DatasetHandle::from_raw(synth_blobs(3, 40, &[6], 3.0, seed).unwrap(), 0, false).unwrap()
    }

    fn cfg(method: PruneMethod, iterations: usize) -> TicketConfig {
        let mut c = TicketConfig::new(iterations, 2, PruningSpec::new(method, 0.2), 1);
        c.lr = 0.05;
        c.batch_size = 8;
        c
    }

    #[test]
    fn two_local_iterations_prune_thirty_six_percent_per_layer() {
        let arch = ArchId::Mlp(vec![6, 20, 3]);
        let (t, rec) = source_bespoke(&blobs(1), &arch, &cfg(PruneMethod::L1Unstructured, 2)).unwrap();
        // 120 -> 96 -> 77 ; 60 -> 48 -> 38
        assert_eq!(t.mask.layers()[0].count_ones(), 77);
        assert_eq!(t.mask.layers()[1].count_ones(), 38);
        assert_eq!(rec.points.len(), 3);
        assert!(rec.points.windows(2).all(|w| w[0].sparsity <= w[1].sparsity));
        assert!(rec.points[0].test_accuracy.is_some());
        assert!(rec.points[2].test_accuracy.is_none());
    }

    #[test]
    fn rewind_keeps_unpruned_weights_at_init() {
        let arch = ArchId::Mlp(vec![6, 20, 3]);
        let data = blobs(2);
        let mut checked = 0;
        source_bespoke_observed(&data, &arch, &cfg(PruneMethod::GlobalUnstructured, 3), |k, net| {
            if k == 0 {
                return;
            }
            let init = net.init_snapshot();
            for ((p, s), m) in net.params().layers.iter().zip(&init.params.layers).zip(net.mask().layers()) {
                for i in m.iter_ones() {
                    assert_eq!(p.weight.data()[i].to_bits(), s.weight.data()[i].to_bits());
                }
                assert_eq!(p.bias, s.bias);
            }
            checked += 1;
        })
        .unwrap();
        assert_eq!(checked, 3);
    }

    #[test]
    fn finetune_and_rewind_diverge() {
        let arch = ArchId::Mlp(vec![6, 20, 3]);
        let data = blobs(3);
        let mut c = cfg(PruneMethod::L1Unstructured, 3);
        let (rewound, _) = source_bespoke(&data, &arch, &c).unwrap();
        c.handling = WeightHandling::Finetune;
        let (tuned, _) = source_bespoke(&data, &arch, &c).unwrap();
        assert!(jaccard_distance(&rewound.mask, &tuned.mask).unwrap() > 0.0);
    }

    #[test]
    fn single_task_pret_a_porter_is_the_bespoke_mask() {
        let arch = ArchId::Mlp(vec![6, 20, 3]);
        let data = [blobs(4)];
        let c = cfg(PruneMethod::GlobalUnstructured, 2);
        let pap = pret_a_porter(&data, &arch, &c, None, 1).unwrap();
        let (bespoke, _) = source_bespoke(&data[0], &arch, &c).unwrap();
        assert_eq!(pap.ticket.mask, bespoke.mask);
        assert_eq!(pap.ticket.provenance.kind, TicketKind::PretAPorter);
    }

    #[test]
    fn pret_a_porter_union_and_intersection() {
        let arch = ArchId::Mlp(vec![6, 20, 3]);
        let data = [blobs(5), blobs(6), blobs(7)];
        let c = cfg(PruneMethod::GlobalUnstructured, 2);
        let inter = pret_a_porter(&data, &arch, &c, None, 3).unwrap();
        let masks: Vec<&Mask> = inter.bespoke.iter().map(|(t, _)| &t.mask).collect();
        let and = masks[1..].iter().fold(masks[0].clone(), |a, m| a.and(m).unwrap());
        assert_eq!(inter.ticket.mask, and);
        let union = pret_a_porter(&data, &arch, &c, Some(1), 2).unwrap();
        let min_sparsity = masks.iter().map(|m| m.count_zeros()).min().unwrap();
        assert!(union.ticket.mask.count_zeros() <= min_sparsity);
        assert!(pret_a_porter(&data, &arch, &c, Some(4), 1).is_err());
        assert!(pret_a_porter(&[], &arch, &c, None, 1).is_err());
    }

    #[test]
    fn incompatible_tasks_are_rejected() {
        let other = DatasetHandle::from_raw(synth_blobs(2, 40, &[6], 3.0, 1).unwrap(), 0, false).unwrap();
        let r = pret_a_porter(&[blobs(1), other], &ArchId::Mlp(vec![6, 4, 3]), &cfg(PruneMethod::L1Unstructured, 1), None, 1);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn random_ticket_counts() {
        let arch = ArchId::Mlp(vec![6, 20, 3]);
        let t0 = random_ticket(&arch, &[6], 3, 0.0, 1).unwrap();
        assert_eq!(t0.mask.count_zeros(), 0);
        let t = random_ticket(&arch, &[6], 3, 0.85, 1).unwrap();
        assert_eq!(t.mask.count_zeros(), 153); // round(0.85 * 180)
        assert!(random_ticket(&arch, &[6], 3, 1.0, 1).is_err());
    }

    #[test]
    fn all_ones_ticket_retrains_like_the_base_net() {
        let arch = ArchId::Mlp(vec![6, 20, 3]);
        let data = blobs(8);
        let ticket = random_ticket(&arch, &[6], 3, 0.0, 2).unwrap();
        let opts = TrainOptions { epochs: 2, lr: 0.05, batch_size: 8 };
        let acc = retrain(&ticket, &data, &opts, 9).unwrap();
        let mut net = build_network(&arch, &[6], 3, 2).unwrap();
        train_from(&mut net, &data, &opts, &SeededRng::new(9).derive("retrain"), 0).unwrap();
        assert_eq!(acc, net.accuracy(&data.test.images, &data.test.labels).unwrap());
        let fresh = build_network(&arch, &[6], 3, 2).unwrap();
        assert_eq!(
            eval_at_init(&ticket, &data).unwrap(),
            fresh.accuracy(&data.test.images, &data.test.labels).unwrap()
        );
    }

    #[test]
    fn ticket_bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let arch = ArchId::Mlp(vec![6, 20, 3]);
        let (t, _) = source_bespoke(&blobs(9), &arch, &cfg(PruneMethod::L2Structured, 1)).unwrap();
        t.save(dir.path()).unwrap();
        assert_eq!(Ticket::load(dir.path()).unwrap(), t);
    }
}
