use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::plot::{curve_svg, Series};
use crate::algebra::{consensus_histogram, jaccard_matrix, LabeledMatrix};
use crate::analysis::params_table;
use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::lottery::{combine_tickets, random_ticket, retrain, source_bespoke, RunRecord, Ticket};
use crate::mask::Mask;
use crate::nn::TrainOptions;
use crate::pool::parallel_map;
use crate::prune::PruningSpec;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const FAILURES_FILE: &str = "failures.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    /// Completed jobs and the files each produced.
    pub jobs: BTreeMap<String, BTreeMap<String, String>>,
    /// Every deterministic output file (relative path -> sha256).
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Option<Manifest> {
        let bytes = std::fs::read(dir.join(MANIFEST_FILE)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn job_intact(&self, dir: &Path, id: &str) -> bool {
        self.jobs.get(id).is_some_and(|files| {
            files
                .iter()
                .all(|(rel, hash)| std::fs::read(dir.join(rel)).is_ok_and(|b| sha256_hex(&b) == *hash))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub jobs_run: usize,
    pub jobs_skipped: usize,
    pub manifest: Manifest,
}

/// Writes files below one root and remembers their hashes.
struct Out<'a> {
    root: &'a Path,
    files: BTreeMap<String, String>,
}

impl<'a> Out<'a> {
    fn new(root: &'a Path) -> Self {
        Out { root, files: BTreeMap::new() }
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.files.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn write_ticket(&mut self, rel: &str, t: &Ticket) -> Result<()> {
        let mut mask = Vec::new();
        t.mask.write_to(&mut mask)?;
        let mut init = Vec::new();
        t.init.params.write_to(&mut init)?;
        self.write(&format!("{rel}/{}", crate::lottery::MASK_FILE), &mask)?;
        self.write(&format!("{rel}/{}", crate::lottery::INIT_FILE), &init)?;
        self.write(&format!("{rel}/{}", crate::lottery::PROVENANCE_FILE), &pretty(&t.provenance)?)
    }
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

fn bespoke_dir(method: &str, dataset: &str, seed: u64) -> String {
    format!("bespoke/{method}/{dataset}/seed{seed}")
}

/// Mean and sample standard deviation (`0` for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

struct Sourced {
    ticket: Ticket,
    record: RunRecord,
}

fn load_sourced(dir: &Path, rel: &str, iterations: usize) -> Result<Sourced> {
    let ticket = Ticket::load(dir.join(rel))?;
    let mut record: RunRecord = serde_json::from_slice(&std::fs::read(dir.join(format!("{rel}/record.json")))?)?;
    record.masks = (1..=iterations)
        .map(|k| Mask::load(dir.join(format!("{rel}/masks/iter{k}.ltmk"))))
        .collect::<Result<_>>()?;
    Ok(Sourced { ticket, record })
}

fn resolved_config_bytes(cfg: &ExperimentConfig) -> Result<Vec<u8>> {
    let mut v = serde_json::to_value(cfg)?;
    if let Some(o) = v.as_object_mut() {
        // Scheduling and placement do not change results.
        o.remove("jobs");
        o.remove("out");
    }
    pretty(&v)
}

/// Runs the full experiment grid into `dir`. Jobs recorded as complete in
/// an existing manifest (with intact files) are not rerun.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let started = Instant::now();
    std::fs::create_dir_all(dir)?;
    let config_bytes = resolved_config_bytes(cfg)?;
    let config_sha = sha256_hex(&config_bytes);
    let previous = Manifest::load(dir).filter(|m| m.config_sha256 == config_sha).unwrap_or_default();
    let _ = std::fs::remove_file(dir.join(FAILURES_FILE));

    let shape = cfg.resolved_input_shape();
    let root = cfg.data_root();
    let raws = cfg
        .datasets
        .iter()
        .map(|d| d.load_raw(&root, &shape))
        .collect::<Result<Vec<_>>>()?;
    let num_classes = cfg
        .num_classes
        .unwrap_or_else(|| raws.iter().map(|r| r.num_classes).max().unwrap_or(2));
    if let Some(r) = raws.iter().find(|r| r.num_classes > num_classes) {
        return Err(Error::Config(format!(
            "dataset `{}` has {} classes, more than num_classes = {num_classes}",
            r.name, r.num_classes
        )));
    }
    // handles[seed index][dataset index]
    let handles: Vec<Vec<DatasetHandle>> = cfg
        .seeds
        .iter()
        .map(|&seed| {
            raws.iter()
                .zip(&cfg.datasets)
                .map(|(raw, d)| {
                    let mut h = crate::data::preprocess(raw.clone(), &shape, d.augment, seed)?;
                    h.num_classes = num_classes;
                    Ok(h)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut manifest = Manifest {
        config_sha256: config_sha,
        ..Manifest::default()
    };
    let mut timings: BTreeMap<String, u128> = BTreeMap::new();
    let mut failures: Vec<(String, String)> = Vec::new();
    let (mut run, mut skipped) = (0, 0);

    // Stage 1: bespoke sourcing, one job per (method, dataset, seed).
    struct SourceJob<'a> {
        id: String,
        rel: String,
        spec: &'a PruningSpec,
        mi: usize,
        si: usize,
        di: usize,
    }
    let mut jobs = Vec::new();
    for (mi, spec) in cfg.pruning.iter().enumerate() {
        for (si, &seed) in cfg.seeds.iter().enumerate() {
            for (di, d) in cfg.datasets.iter().enumerate() {
                let rel = bespoke_dir(spec.method.name(), &d.name, seed);
                jobs.push(SourceJob { id: format!("source/{rel}"), rel, spec, mi, si, di });
            }
        }
    }
    let results = parallel_map(&jobs, cfg.jobs, |_, job| -> Result<(Sourced, BTreeMap<String, String>, bool)> {
        if previous.job_intact(dir, &job.id) {
            let s = load_sourced(dir, &job.rel, cfg.iterations)?;
            return Ok((s, previous.jobs[&job.id].clone(), false));
        }
        let seed = cfg.seeds[job.si];
        let data = &handles[job.si][job.di];
        let (ticket, record) = source_bespoke(data, &cfg.arch, &cfg.ticket_config(job.spec, seed))?;
        let mut out = Out::new(dir);
        out.write_ticket(&job.rel, &ticket)?;
        out.write(&format!("{}/record.json", job.rel), &pretty(&record)?)?;
        out.write(&format!("{}/curve.csv", job.rel), record.to_csv().as_bytes())?;
        for (k, m) in record.masks.iter().enumerate() {
            let mut b = Vec::new();
            m.write_to(&mut b)?;
            out.write(&format!("{}/masks/iter{}.ltmk", job.rel, k + 1), &b)?;
        }
        Ok((Sourced { ticket, record }, out.files, true))
    });
    let mut sourced: BTreeMap<(usize, usize, usize), Sourced> = BTreeMap::new();
    for (job, r) in jobs.iter().zip(results) {
        match r {
            Ok((s, files, fresh)) => {
                if fresh {
                    run += 1;
                    timings.insert(job.id.clone(), s.record.elapsed_ms);
                } else {
                    skipped += 1;
                }
                manifest.files.extend(files.clone());
                manifest.jobs.insert(job.id.clone(), files);
                sourced.insert((job.mi, job.si, job.di), s);
            }
            Err(e) => failures.push((job.id.clone(), e.to_string())),
        }
    }
    if !failures.is_empty() {
        return fail(dir, manifest, failures);
    }

    let mut out = Out::new(dir);
    let labels: Vec<String> = cfg.datasets.iter().map(|d| d.name.clone()).collect();

    // Stage 2: distances, consensus and combined tickets per (method, seed).
    let mut combined: BTreeMap<(usize, usize), Ticket> = BTreeMap::new();
    for (mi, spec) in cfg.pruning.iter().enumerate() {
        let method = spec.method.name();
        let mut jaccard_sum: Option<LabeledMatrix> = None;
        let mut pap_rows = String::from(
            "# sparsity = fraction of weights pruned; tau = minimum number of task masks keeping a weight\n\
             seed,tau,sparsity,max_constituent_sparsity\n",
        );
        for (si, &seed) in cfg.seeds.iter().enumerate() {
            let tickets: Vec<Ticket> = (0..cfg.datasets.len())
                .map(|di| sourced[&(mi, si, di)].ticket.clone())
                .collect();
            let masks: Vec<Mask> = tickets.iter().map(|t| t.mask.clone()).collect();
            let jm = jaccard_matrix(&labels, &masks)?;
            let mut text = format!("# Jaccard distance between final masks (0 = identical); method={method} seed={seed}\n");
            text.push_str(&jm.to_csv("dataset"));
            out.write(&format!("jaccard/{method}/seed{seed}.csv"), text.as_bytes())?;
            jaccard_sum = Some(match jaccard_sum {
                None => jm,
                Some(mut acc) => {
                    acc.values.iter_mut().flatten().zip(jm.values.iter().flatten()).for_each(|(a, b)| *a += b);
                    acc
                }
            });

            let (ticket, cmap) = combine_tickets(&tickets, cfg.tau)?;
            let provenance = format!("method={method} seed={seed} datasets={}", labels.join(";"));
            out.write(
                &format!("consensus/{method}/seed{seed}.csv"),
                consensus_histogram(&cmap).to_csv(&provenance).as_bytes(),
            )?;
            if cfg.pret_a_porter {
                let max_c = tickets.iter().map(Ticket::sparsity).fold(0.0, f64::max);
                let _ = writeln!(
                    pap_rows,
                    "{seed},{},{:.6},{max_c:.6}",
                    ticket.provenance.tau.unwrap_or(0),
                    ticket.sparsity()
                );
                out.write_ticket(&format!("pap/{method}/seed{seed}"), &ticket)?;
                combined.insert((mi, si), ticket);
            }
        }
        if let Some(mut m) = jaccard_sum {
            let n = cfg.seeds.len() as f64;
            m.values.iter_mut().flatten().for_each(|v| *v /= n);
            let mut text = format!("# Jaccard distance between final masks, mean over {} seeds; method={method}\n", cfg.seeds.len());
            text.push_str(&m.to_csv("dataset"));
            out.write(&format!("jaccard/{method}/mean.csv"), text.as_bytes())?;
        }
        if cfg.pret_a_porter {
            out.write(&format!("pap/{method}/summary.csv"), pap_rows.as_bytes())?;
        }
    }

    // Stage 3: retrain every ticket on every task.
    if let (Some(tc), true) = (&cfg.transfer, cfg.pret_a_porter) {
        let opts = TrainOptions {
            epochs: tc.epochs,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
        };
        let mut tickets: BTreeMap<(usize, usize, String), Ticket> = BTreeMap::new();
        let mut ticket_labels: Vec<String> = labels.iter().map(|l| format!("bespoke:{l}")).collect();
        ticket_labels.push("pap".into());
        if tc.random_baseline {
            ticket_labels.push("random".into());
        }
        for (mi, spec) in cfg.pruning.iter().enumerate() {
            for (si, &seed) in cfg.seeds.iter().enumerate() {
                for (di, l) in labels.iter().enumerate() {
                    tickets.insert((mi, si, format!("bespoke:{l}")), sourced[&(mi, si, di)].ticket.clone());
                }
                let pap = combined[&(mi, si)].clone();
                if tc.random_baseline {
                    let r = random_ticket(&cfg.arch, &shape, num_classes, pap.sparsity(), seed)?;
                    out.write_ticket(&format!("random/{}/seed{seed}", spec.method.name()), &r)?;
                    tickets.insert((mi, si, "random".into()), r);
                }
                tickets.insert((mi, si, "pap".into()), pap);
            }
        }
        struct RetrainJob {
            id: String,
            rel: String,
            key: (usize, usize, String),
            di: usize,
        }
        let mut rjobs = Vec::new();
        for (mi, spec) in cfg.pruning.iter().enumerate() {
            for (si, &seed) in cfg.seeds.iter().enumerate() {
                for tl in &ticket_labels {
                    for (di, target) in labels.iter().enumerate() {
                        let rel = format!(
                            "transfer/{}/seed{seed}/{}/{target}.json",
                            spec.method.name(),
                            tl.replace(':', "-")
                        );
                        rjobs.push(RetrainJob { id: format!("retrain/{rel}"), rel, key: (mi, si, tl.clone()), di });
                    }
                }
            }
        }
        #[derive(Serialize, Deserialize)]
        struct Accuracy {
            test_accuracy: f64,
        }
        let results = parallel_map(&rjobs, cfg.jobs, |_, job| -> Result<(f64, Option<u128>)> {
            if previous.job_intact(dir, &job.id) {
                let a: Accuracy = serde_json::from_slice(&std::fs::read(dir.join(&job.rel))?)?;
                return Ok((a.test_accuracy, None));
            }
            let t0 = Instant::now();
            let seed = cfg.seeds[job.key.1];
            let acc = retrain(&tickets[&job.key], &handles[job.key.1][job.di], &opts, seed)?;
            let path = dir.join(&job.rel);
            std::fs::create_dir_all(path.parent().unwrap())?;
            std::fs::write(&path, pretty(&Accuracy { test_accuracy: acc })?)?;
            Ok((acc, Some(t0.elapsed().as_millis())))
        });
        let mut acc: BTreeMap<(usize, usize, String, usize), f64> = BTreeMap::new();
        for (job, r) in rjobs.iter().zip(results) {
            match r {
                Ok((a, t)) => {
                    match t {
                        Some(ms) => {
                            run += 1;
                            timings.insert(job.id.clone(), ms);
                        }
                        None => skipped += 1,
                    }
                    let hash = sha256_hex(&std::fs::read(dir.join(&job.rel))?);
                    manifest.files.insert(job.rel.clone(), hash.clone());
                    manifest.jobs.insert(job.id.clone(), BTreeMap::from([(job.rel.clone(), hash)]));
                    acc.insert((job.key.0, job.key.1, job.key.2.clone(), job.di), a);
                }
                Err(e) => failures.push((job.id.clone(), e.to_string())),
            }
        }
        if !failures.is_empty() {
            manifest.files.extend(out.files);
            return fail(dir, manifest, failures);
        }
        for (mi, spec) in cfg.pruning.iter().enumerate() {
            let method = spec.method.name();
            let mut raw = format!(
                "# test accuracy (fraction correct) after retraining for {} epochs; method={method}\nseed,ticket,target,test_accuracy\n",
                tc.epochs
            );
            let mut agg = format!(
                "# test accuracy after retraining, mean and sample std over seeds {:?}; method={method}\nticket,target,mean,std,n\n",
                cfg.seeds
            );
            for tl in &ticket_labels {
                for (di, target) in labels.iter().enumerate() {
                    let vals: Vec<f64> = (0..cfg.seeds.len()).map(|si| acc[&(mi, si, tl.clone(), di)]).collect();
                    for (si, v) in vals.iter().enumerate() {
                        let _ = writeln!(raw, "{},{tl},{target},{v:.6}", cfg.seeds[si]);
                    }
                    let (m, s) = mean_std(&vals);
                    let _ = writeln!(agg, "{tl},{target},{m:.6},{s:.6},{}", vals.len());
                }
            }
            out.write(&format!("transfer/{method}/raw.csv"), raw.as_bytes())?;
            out.write(&format!("transfer/{method}/summary.csv"), agg.as_bytes())?;
        }
    }

    // Stage 4: effective sparsity tables and accuracy-sparsity curves.
    for (mi, spec) in cfg.pruning.iter().enumerate() {
        let method = spec.method.name();
        let records: Vec<RunRecord> = (0..cfg.datasets.len())
            .flat_map(|di| (0..cfg.seeds.len()).map(move |si| (si, di)))
            .map(|(si, di)| sourced[&(mi, si, di)].record.clone())
            .collect();
        let report = params_table(&records);
        out.write(&format!("effective/{method}.csv"), report.to_csv().as_bytes())?;
        out.write(&format!("effective/{method}_layers.csv"), report.layers_csv().as_bytes())?;

        let mut series = Vec::new();
        for (di, name) in labels.iter().enumerate() {
            let mut text = format!(
                "# accuracy-sparsity curve, mean and sample std over seeds {:?}; method={method} dataset={name}\n\
                 iteration,sparsity,test_accuracy_mean,test_accuracy_std,n\n",
                cfg.seeds
            );
            let mut pts = Vec::new();
            for k in 0..=cfg.iterations {
                let pts_k: Vec<_> = (0..cfg.seeds.len()).map(|si| &sourced[&(mi, si, di)].record.points[k]).collect();
                let accs: Vec<f64> = pts_k.iter().filter_map(|p| p.test_accuracy).collect();
                if accs.is_empty() {
                    continue;
                }
                let sp = pts_k.iter().map(|p| p.sparsity).sum::<f64>() / pts_k.len() as f64;
                let (m, s) = mean_std(&accs);
                let _ = writeln!(text, "{k},{sp:.6},{m:.6},{s:.6},{}", accs.len());
                pts.push((sp, m, s));
            }
            out.write(&format!("curves/{method}/{name}.csv"), text.as_bytes())?;
            series.push(Series { label: name.clone(), points: pts });
        }
        if cfg.plots {
            let svg = curve_svg(&format!("{method}: test accuracy vs sparsity"), &series);
            out.write(&format!("plots/{method}.svg"), svg.as_bytes())?;
        }
    }

    out.write(CONFIG_FILE, &config_bytes)?;
    manifest.files.extend(out.files);
    std::fs::write(dir.join(MANIFEST_FILE), pretty(&manifest)?)?;
    #[derive(Serialize)]
    struct Timings<'a> {
        jobs: usize,
        total_ms: u128,
        per_job_ms: &'a BTreeMap<String, u128>,
    }
    std::fs::write(
        dir.join(TIMINGS_FILE),
        pretty(&Timings { jobs: cfg.jobs, total_ms: started.elapsed().as_millis(), per_job_ms: &timings })?,
    )?;
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        jobs_run: run,
        jobs_skipped: skipped,
        manifest,
    })
}

fn fail(dir: &Path, manifest: Manifest, failures: Vec<(String, String)>) -> Result<RunSummary> {
    std::fs::write(dir.join(MANIFEST_FILE), pretty(&manifest)?)?;
    let report: BTreeMap<&str, &str> = failures.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    std::fs::write(dir.join(FAILURES_FILE), pretty(&report)?)?;
    Err(Error::JobsFailed {
        failed: failures.len(),
        names: failures.into_iter().map(|(n, _)| n).collect(),
    })
}
