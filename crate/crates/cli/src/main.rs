//! `dccm` command-line tool.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, missing files
//! named on the command line), 2 when the work itself fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use serde_json::json;

use dccm::checkpoint::Checkpoint;
use dccm::correlation::SimilarityMatrix;
use dccm::data::{generate_blobs, load_dataset, save_dataset, BlobsSpec, Dataset};
use dccm::evaluate::{evaluate, predict, spread_indices};
use dccm::experiment::ExperimentConfig;
use dccm::gradsuite::run_gradient_suite;
use dccm::graph_analysis::{
    bcubed_csv, bcubed_curve, concentration_histogram, find_k_partition_threshold, threshold_partition_sweep,
    verify_one_hot,
};
use dccm::metrics::Partition;
use dccm::train::{resume, train, Trainer};

#[derive(Parser)]
#[command(name = "dccm", version, about = "Deep clustering by correlation mining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory; overrides `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster a dataset with a trained checkpoint and score it.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pseudo-graph diagnostics: BCubed curve, K-partition threshold, one-hot fraction.
    AnalyzeGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.8,0.9,0.95,0.99")]
        thresholds: Vec<f64>,
        /// Samples used for the pairwise analysis.
        #[arg(long, default_value_t = 1000)]
        max_samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset.
    GenData {
        #[arg(long, value_parser = ["blobs"])]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        clusters: usize,
        #[arg(long, default_value_t = 100)]
        per_cluster: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 10.0)]
        separation: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every primitive and loss.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<dccm::Error> for Failure {
    fn from(e: dccm::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn load_trainer(checkpoint: &Path, data: &Path) -> Result<(Trainer, Dataset), Failure> {
    require(checkpoint, "checkpoint")?;
    require(data, "dataset")?;
    let ds = load_dataset(data)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    Ok((Trainer::from_checkpoint(&ckpt, &ds)?, ds))
}

fn cmd_train(config: PathBuf, resume_from: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), Failure> {
    require(&config, "config file")?;
    let mut cfg = ExperimentConfig::load(&config).map_err(|e| Failure::Usage(format!("{}: {e}", config.display())))?;
    if out.is_some() {
        cfg.out_dir = out;
    }
    let data = cfg.dataset.load()?;
    info!("dataset {}: {} samples of shape {:?}", data.name, data.len(), data.sample_shape());
    let outcome = match resume_from {
        Some(path) => {
            require(&path, "checkpoint")?;
            let mut t = Trainer::from_checkpoint(&Checkpoint::load(&path)?, &data)?;
            t.set_epochs(cfg.epochs);
            t.set_out_dir(cfg.out_dir.clone());
            info!("resuming at epoch {} of {}", t.epoch(), cfg.epochs);
            resume(t, &data)?
        }
        None => train(cfg, &data)?,
    };
    let last = outcome.last();
    match last.scores {
        Some(s) => println!("epoch {}: nmi {:.4} acc {:.4} ari {:.4}", last.epoch, s.nmi, s.acc, s.ari),
        None => println!("epoch {}: done", last.epoch),
    }
    Ok(())
}

fn cmd_eval(checkpoint: PathBuf, data: PathBuf, out: Option<PathBuf>) -> Result<(), Failure> {
    let (trainer, ds) = load_trainer(&checkpoint, &data)?;
    let report = evaluate(&trainer.encoder, &ds, &trainer.config().eval)?;
    let summary = json!({
        "samples": ds.len(),
        "scores": report.scores,
        "bcubed": report.bcubed,
        "histogram": report.histogram,
        "confident_frac": report.confident_frac,
    });
    let text = serde_json::to_string_pretty(&summary).expect("plain values");
    println!("{text}");
    if let Some(dir) = out {
        write_out(&dir, "eval.json", &text)?;
        write_out(&dir, "embeddings.csv", &report.embeddings_csv)?;
        let labels: String = report.labels.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")).collect();
        write_out(&dir, "labels.csv", &format!("sample_id,label\n{labels}"))?;
    }
    Ok(())
}

fn cmd_analyze(
    checkpoint: PathBuf,
    data: PathBuf,
    thresholds: Vec<f64>,
    max_samples: usize,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    if thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(Failure::Usage(format!("thresholds must lie in (0, 1): {thresholds:?}")));
    }
    let (trainer, ds) = load_trainer(&checkpoint, &data)?;
    let idx = spread_indices(ds.len(), max_samples.max(2));
    let sub = ds.subset(&idx);
    let z = predict(&trainer.encoder, &sub, trainer.config().eval.chunk)?.z;
    let s = SimilarityMatrix::of(&z)?;
    let k = trainer.encoder.config().num_classes;
    let sweep = threshold_partition_sweep(&s.to_tensor())?;
    let level = find_k_partition_threshold(&sweep, k.min(sub.len()))?;
    let (one_hot, _) = verify_one_hot(&z, 1e-3);
    let curve = match sub.ground_truth() {
        Some(t) => Some(bcubed_curve(&s, &Partition::from_labels(t.labels()), &thresholds)?),
        None => None,
    };
    let summary = json!({
        "samples": sub.len(),
        "k": k,
        "k_partition": level.as_ref().map(|l| json!({"lo": l.lo, "hi": l.hi})),
        "one_hot_frac": one_hot,
        "histogram": concentration_histogram(&z),
        "bcubed": curve,
    });
    let text = serde_json::to_string_pretty(&summary).expect("plain values");
    println!("{text}");
    if let Some(dir) = out {
        write_out(&dir, "graph.json", &text)?;
        if let Some(c) = &curve {
            write_out(&dir, "bcubed.csv", &bcubed_csv(c))?;
        }
    }
    Ok(())
}

fn cmd_gradcheck(seeds: u64) -> Result<(), Failure> {
    let results = run_gradient_suite(&(0..seeds).collect::<Vec<_>>())?;
    let mut worst: f64 = 0.0;
    for r in &results {
        println!("{:<6} {:<20} {:.3e} (tol {:.0e})", if r.passed() { "ok" } else { "FAIL" }, r.name, r.max_error, r.tolerance);
        worst = worst.max(r.max_error);
    }
    println!("max relative error {worst:.3e} over {} checks and {seeds} seeds", results.len());
    match results.iter().filter(|r| !r.passed()).count() {
        0 => Ok(()),
        n => Err(Failure::Runtime(format!("{n} gradient checks failed"))),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, resume, out } => cmd_train(config, resume, out),
        Command::Eval { checkpoint, data, out } => cmd_eval(checkpoint, data, out),
        Command::AnalyzeGraph { checkpoint, data, thresholds, max_samples, out } => {
            cmd_analyze(checkpoint, data, thresholds, max_samples, out)
        }
        Command::GenData { kind: _, out, clusters, per_cluster, dim, separation, sigma, seed } => {
            let ds = generate_blobs(&BlobsSpec { clusters, per_cluster, dim, separation, sigma, seed })
                .map_err(|e| Failure::Usage(e.to_string()))?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            save_dataset(&out, &ds)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
            Ok(())
        }
        Command::Gradcheck { seeds } => cmd_gradcheck(seeds),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
