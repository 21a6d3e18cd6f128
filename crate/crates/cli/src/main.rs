use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lottery_core::algebra::{consensus, consensus_histogram, jaccard_matrix, threshold_mask};
use lottery_core::analysis::{
    agreement_csv, effective_mask, init_stats, init_stats_csv, prediction_agreement,
};
use lottery_core::data::DatasetHandle;
use lottery_core::harness::{run_experiment, ExperimentConfig};
use lottery_core::lottery::{pret_a_porter, retrain, source_bespoke, Ticket};
use lottery_core::nn::{build_network, train, train_from, Network, TrainOptions};
use lottery_core::{Error, Mask, SeededRng};

#[derive(Parser)]
#[command(name = "lottery", version, about = "Source, combine and analyse lottery tickets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for single-run commands (default: first seed of the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Seed list overriding the config, e.g. `0,1,2` or `0..3`.
    #[arg(long)]
    seeds: Option<String>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory or file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Train an unpruned network on one dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Source a bespoke ticket by iterative pruning on one dataset.
    Source {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<String>,
        /// Pruning method (default: first in the config).
        #[arg(long)]
        method: Option<String>,
    },
    /// Source bespoke tickets on every config dataset and combine them.
    PretAPorter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<String>,
        /// Keep weights unpruned in at least this many tasks (default: all).
        #[arg(long)]
        tau: Option<usize>,
    },
    /// Retrain a ticket from its initialization and report test accuracy.
    Retrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ticket: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Pairwise Jaccard distances between masks (files or ticket directories).
    Jaccard {
        #[command(flatten)]
        common: Common,
        #[arg(required = true, num_args = 2..)]
        masks: Vec<PathBuf>,
    },
    /// Consensus histogram of masks; with `--tau` also write the thresholded mask.
    Consensus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tau: Option<usize>,
        #[arg(required = true)]
        masks: Vec<PathBuf>,
    },
    /// Explicit vs effective unpruned counts per layer of a ticket.
    EffectiveSparsity {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        tickets: Vec<PathBuf>,
    },
    /// Retrain tickets on one dataset and count agreeing test predictions.
    Agreement {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(required = true, num_args = 2..)]
        tickets: Vec<PathBuf>,
    },
    /// Standard deviation of initial weights kept by tickets vs full layers.
    InitStats {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        tickets: Vec<PathBuf>,
    },
    /// Run the full experiment grid of a config into a run directory.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a >= b {
            bail!("empty seed range `{s}`");
        }
        return Ok((a..b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(Into::into)).collect()
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let path = self.config.as_ref().context("--config is required for this command")?;
        let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
        if let Some(s) = &self.seeds {
            cfg.seeds = parse_seeds(s)?;
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn seed(&self, cfg: Option<&ExperimentConfig>) -> u64 {
        self.seed.or_else(|| cfg.map(|c| c.seeds[0])).unwrap_or(0)
    }

    fn out_dir(&self, cfg: Option<&ExperimentConfig>) -> Result<PathBuf> {
        self.out
            .clone()
            .or_else(|| cfg.and_then(|c| c.out.clone()))
            .context("--out is required for this command")
    }

    /// Writes `text` to `--out` if given, else stdout.
    fn emit(&self, csv: String, json: serde_json::Value) -> Result<()> {
        let text = match self.format {
            Format::Csv => csv,
            Format::Json => serde_json::to_string_pretty(&json)? + "\n",
        };
        match &self.out {
            Some(p) => {
                if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent)?;
                }
                std::fs::write(p, text)?;
            }
            None => print!("{text}"),
        }
        Ok(())
    }
}

fn dataset(cfg: &ExperimentConfig, name: Option<&str>, seed: u64) -> Result<DatasetHandle> {
    let d = match name {
        Some(n) => cfg
            .datasets
            .iter()
            .find(|d| d.name == n)
            .with_context(|| format!("dataset `{n}` not in config"))?,
        None => &cfg.datasets[0],
    };
    let shape = cfg.resolved_input_shape();
    let mut h = d.load(&cfg.data_root(), &shape, seed)?;
    if let Some(k) = cfg.num_classes {
        h.num_classes = h.num_classes.max(k);
    }
    Ok(h)
}

fn load_mask(p: &Path) -> Result<Mask> {
    let file = if p.is_dir() { p.join(lottery_core::lottery::MASK_FILE) } else { p.to_path_buf() };
    Mask::load(&file).with_context(|| format!("reading mask {}", file.display()))
}

fn load_ticket(p: &Path) -> Result<Ticket> {
    Ticket::load(p).with_context(|| format!("reading ticket {}", p.display()))
}

fn label(p: &Path) -> String {
    let p = if p.file_name().is_some_and(|n| n == lottery_core::lottery::MASK_FILE) {
        p.parent().unwrap_or(p)
    } else {
        p
    };
    p.to_string_lossy().replace(',', "_")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, dataset: name } => {
            let cfg = common.config()?;
            let seed = common.seed(Some(&cfg));
            let data = dataset(&cfg, name.as_deref(), seed)?;
            let mut net = build_network(&cfg.arch, data.example_shape(), data.num_classes, seed)?;
            let log = train(&mut net, &data, &cfg.train_options(), &SeededRng::new(seed).derive("train"))?;
            let test = net.accuracy(&data.test.images, &data.test.labels)?;
            if let Some(dir) = &common.out {
                std::fs::create_dir_all(dir)?;
                net.params().save(dir.join("trained.ltpc"))?;
                net.init_snapshot().params.save(dir.join("init.ltpc"))?;
            }
            let mut csv = format!("# training log; dataset={} seed={seed}\nepoch,train_loss,val_accuracy\n", data.name);
            for e in &log.epochs {
                let _ = writeln!(csv, "{},{:.6},{}", e.epoch, e.train_loss, e.val_accuracy.map_or(String::new(), |v| format!("{v:.6}")));
            }
            let _ = writeln!(csv, "# test_accuracy={test:.6}");
            let json = serde_json::json!({ "dataset": data.name, "seed": seed, "epochs": log.epochs, "test_accuracy": test });
            let common = Common { out: common.out.map(|d| d.join(format!("log.{}", ext(common.format)))), ..common };
            common.emit(csv, json)
        }
        Command::Source { common, dataset: name, method } => {
            let cfg = common.config()?;
            let seed = common.seed(Some(&cfg));
            let data = dataset(&cfg, name.as_deref(), seed)?;
            let spec = pick_method(&cfg, method.as_deref())?;
            let (ticket, record) = source_bespoke(&data, &cfg.arch, &cfg.ticket_config(&spec, seed))?;
            let dir = common.out_dir(Some(&cfg))?;
            ticket.save(&dir)?;
            std::fs::write(dir.join("curve.csv"), record.to_csv())?;
            std::fs::write(dir.join("record.json"), serde_json::to_string_pretty(&record)? + "\n")?;
            println!("{}: sparsity {:.4} -> {}", data.name, ticket.sparsity(), dir.display());
            Ok(())
        }
        Command::PretAPorter { common, method, tau } => {
            let cfg = common.config()?;
            let seed = common.seed(Some(&cfg));
            let spec = pick_method(&cfg, method.as_deref())?;
            let data = cfg
                .datasets
                .iter()
                .map(|d| dataset(&cfg, Some(&d.name), seed))
                .collect::<Result<Vec<_>>>()?;
            let pap = pret_a_porter(&data, &cfg.arch, &cfg.ticket_config(&spec, seed), tau.or(cfg.tau), cfg.jobs)?;
            let dir = common.out_dir(Some(&cfg))?;
            pap.ticket.save(&dir)?;
            for (t, _) in &pap.bespoke {
                t.save(dir.join("bespoke").join(&t.provenance.sources[0]))?;
            }
            let prov = format!("method={} seed={seed}", spec.method.name());
            std::fs::write(dir.join("consensus.csv"), consensus_histogram(&pap.consensus).to_csv(&prov))?;
            println!("prêt-à-porter ticket: sparsity {:.4} -> {}", pap.ticket.sparsity(), dir.display());
            Ok(())
        }
        Command::Retrain { common, ticket, dataset: name, epochs } => {
            let cfg = common.config()?;
            let seed = common.seed(Some(&cfg));
            let t = load_ticket(&ticket)?;
            let data = dataset(&cfg, name.as_deref(), seed)?;
            let opts = TrainOptions { epochs: epochs.unwrap_or(cfg.epochs), ..cfg.train_options() };
            let acc = retrain(&t, &data, &opts, seed)?;
            let csv = format!(
                "# test accuracy after retraining from init\nticket,dataset,seed,sparsity,test_accuracy\n{},{},{seed},{:.6},{acc:.6}\n",
                label(&ticket),
                data.name,
                t.sparsity()
            );
            let json = serde_json::json!({ "ticket": label(&ticket), "dataset": data.name, "seed": seed, "sparsity": t.sparsity(), "test_accuracy": acc });
            common.emit(csv, json)
        }
        Command::Jaccard { common, masks } => {
            let labels: Vec<String> = masks.iter().map(|p| label(p)).collect();
            let ms = masks.iter().map(|p| load_mask(p)).collect::<Result<Vec<_>>>()?;
            let m = jaccard_matrix(&labels, &ms)?;
            let csv = format!("# Jaccard distance between unpruned-weight sets (0 = identical)\n{}", m.to_csv("mask"));
            common.emit(csv, serde_json::to_value(&m)?)
        }
        Command::Consensus { common, tau, masks } => {
            let ms = masks.iter().map(|p| load_mask(p)).collect::<Result<Vec<_>>>()?;
            let c = consensus(&ms)?;
            let h = consensus_histogram(&c);
            let prov = masks.iter().map(|p| label(p)).collect::<Vec<_>>().join(";");
            if let Some(tau) = tau {
                let m = threshold_mask(&c, tau)?;
                let dir = common.out.clone().context("--out is required with --tau")?;
                std::fs::create_dir_all(&dir)?;
                m.save(dir.join(lottery_core::lottery::MASK_FILE))?;
                std::fs::write(dir.join("histogram.csv"), h.to_csv(&prov))?;
                println!("tau={tau}: sparsity {:.4}", m.count_zeros() as f64 / m.len() as f64);
                return Ok(());
            }
            common.emit(h.to_csv(&prov), serde_json::to_value(&h)?)
        }
        Command::EffectiveSparsity { common, tickets } => {
            let mut csv = String::from(
                "# s = explicitly unpruned weights, s_eff = unpruned weights connected to the output\nticket,layer,total,s,s_eff\n",
            );
            let mut rows = Vec::new();
            for p in &tickets {
                let t = load_ticket(p)?;
                let net = t.network()?;
                let eff = effective_mask(&net)?;
                for (m, e) in t.mask.layers().iter().zip(eff.layers()) {
                    let _ = writeln!(csv, "{},{},{},{},{}", label(p), m.name(), m.len(), m.count_ones(), e.count_ones());
                    rows.push(serde_json::json!({ "ticket": label(p), "layer": m.name(), "total": m.len(), "s": m.count_ones(), "s_eff": e.count_ones() }));
                }
                let _ = writeln!(csv, "{},total,{},{},{}", label(p), t.mask.len(), t.mask.count_ones(), eff.count_ones());
            }
            common.emit(csv, serde_json::Value::Array(rows))
        }
        Command::Agreement { common, dataset: name, epochs, tickets } => {
            let cfg = common.config()?;
            let seed = common.seed(Some(&cfg));
            let data = dataset(&cfg, name.as_deref(), seed)?;
            let opts = TrainOptions { epochs: epochs.unwrap_or(cfg.epochs), ..cfg.train_options() };
            let mut nets: Vec<Network> = Vec::new();
            for p in &tickets {
                let mut net = load_ticket(p)?.network()?;
                train_from(&mut net, &data, &opts, &SeededRng::new(seed).derive("retrain"), 0)?;
                nets.push(net);
            }
            let refs: Vec<&Network> = nets.iter().collect();
            let m = prediction_agreement(&refs, &data.test)?;
            let labels: Vec<String> = tickets.iter().map(|p| label(p)).collect();
            let json = serde_json::json!({ "labels": labels, "test_examples": data.test.len(), "agreement": m });
            common.emit(agreement_csv(&labels, &m, data.test.len()), json)
        }
        Command::InitStats { common, tickets } => {
            let rows = tickets
                .iter()
                .map(|p| Ok((label(p), init_stats(&load_ticket(p)?)?)))
                .collect::<Result<Vec<_>>>()?;
            let json = serde_json::to_value(&rows)?;
            common.emit(init_stats_csv(&rows), json)
        }
        Command::Report { common } => {
            let cfg = common.config()?;
            let dir = common.out_dir(Some(&cfg))?;
            let s = run_experiment(&cfg, &dir)?;
            println!(
                "{}: {} jobs run, {} skipped, {} files",
                dir.display(),
                s.jobs_run,
                s.jobs_skipped,
                s.manifest.files.len()
            );
            Ok(())
        }
    }
}

fn ext(f: Format) -> &'static str {
    match f {
        Format::Csv => "csv",
        Format::Json => "json",
    }
}

fn pick_method(cfg: &ExperimentConfig, method: Option<&str>) -> Result<lottery_core::prune::PruningSpec> {
    match method {
        None => Ok(cfg.pruning[0].clone()),
        Some(m) => {
            let parsed: lottery_core::prune::PruneMethod = m.parse()?;
            Ok(cfg
                .pruning
                .iter()
                .find(|p| p.method == parsed)
                .cloned()
                .unwrap_or_else(|| lottery_core::prune::PruningSpec::new(parsed, 0.2)))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(Error::JobsFailed { names, .. }) = e.downcast_ref::<Error>() {
                for n in names {
                    eprintln!("  failed: {n}");
                }
            }
            ExitCode::FAILURE
        }
    }
}
