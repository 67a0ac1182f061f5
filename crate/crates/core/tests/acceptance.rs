//! Acceptance run: one PASS/FAIL line per criterion, with the measured
//! numbers. Criterion failures are reported, not panicked on; only setup
//! errors abort.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use common::*;
use dccm::checkpoint::Checkpoint;
use dccm::data::{generate_blobs, BlobsSpec, Dataset};
use dccm::evaluate::{cluster_labels, predict};
use dccm::experiment::{Ablation, DatasetSpec, EncoderSpec, ExperimentConfig};
use dccm::gradsuite::run_gradient_suite;
use dccm::graph_analysis::{find_k_partition_threshold, threshold_partition_sweep};
use dccm::metrics::{ari, bcubed, hungarian_acc, nmi, Partition};
use dccm::train::{resume, train, TrainOutcome, Trainer};
use dccm::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, name: &str, pass: bool, secs: f64, limit: f64, detail: String) {
        let ok = pass && secs < limit;
        if !ok {
            self.failed += 1;
        }
        println!("{} {name}: {detail} [{secs:.1}s, limit {limit:.0}s]", if ok { "PASS" } else { "FAIL" });
    }
}

fn blob_config(seed: u64) -> (ExperimentConfig, Dataset) {
    let spec = BlobsSpec { seed, ..Default::default() };
    let cfg = ExperimentConfig {
        dataset: DatasetSpec::Blobs(spec.clone()),
        encoder: EncoderSpec::Mlp { num_classes: 4 },
        seed,
        ..Default::default()
    };
    (cfg, generate_blobs(&spec).expect("blobs"))
}

fn run(cfg: ExperimentConfig, data: &Dataset) -> TrainOutcome {
    train(cfg, data).expect("training run")
}

fn acc_of(o: &TrainOutcome) -> f64 {
    o.last().scores.expect("blobs carry labels").acc
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ")
}

fn gradient_suite(r: &mut Report) {
    let t = Instant::now();
    let results = run_gradient_suite(&(0..10).collect::<Vec<_>>()).expect("gradient suite");
    let worst_p = results.iter().filter(|c| c.tolerance < 1e-5).map(|c| c.max_error).fold(0.0, f64::max);
    let worst_l = results.iter().filter(|c| c.tolerance >= 1e-5).map(|c| c.max_error).fold(0.0, f64::max);
    let bad: Vec<&str> = results.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    r.line(
        "gradient suite",
        bad.is_empty(),
        t.elapsed().as_secs_f64(),
        60.0,
        format!(
            "{} checks x 10 seeds, worst primitive {worst_p:.1e} (< 1e-6), worst loss {worst_l:.1e} (< 1e-4), failing {bad:?}",
            results.len()
        ),
    );
}

fn metric_oracles(r: &mut Report) {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for (a, b) in partition_pairs(99) {
        let (pa, pb) = (Partition::from_labels(&a), Partition::from_labels(&b));
        let (p, rc) = bcubed(&pa, &pb).unwrap();
        let (po, ro) = bcubed_oracle(&a, &b);
        for d in [
            nmi(&pa, &pb).unwrap() - nmi_oracle(&a, &b),
            ari(&pa, &pb).unwrap() - ari_oracle(&a, &b),
            hungarian_acc(&pa, &pb).unwrap() - acc_oracle(&a, &b),
            p - po,
            rc - ro,
        ] {
            worst = worst.max(d.abs());
        }
    }
    r.line("metric oracles", worst < 1e-9, t.elapsed().as_secs_f64(), 10.0, format!("50 pairs, max deviation {worst:.1e}"));
}

fn k_partition(r: &mut Report) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let (mut checked, mut bad) = (0, 0);
    for _ in 0..100 {
        let n = rng.random_range(1..=10);
        let w = random_complete_graph(&mut rng, n);
        let sweep = threshold_partition_sweep(&Tensor::new(vec![n, n], w.concat()).unwrap()).unwrap();
        for k in 1..=n {
            checked += 1;
            let ok = match (find_k_partition_threshold(&sweep, k).unwrap(), k_partition_oracle(&w, k)) {
                (Some(level), Some((lo, labels))) => level.lo == lo && canonical(&level.assignment) == labels,
                _ => false,
            };
            if !ok {
                bad += 1;
            }
        }
    }
    r.line(
        "K-partition threshold",
        bad == 0,
        t.elapsed().as_secs_f64(),
        30.0,
        format!("{checked} (graph, K) cases, {bad} disagreements"),
    );
}

/// Full-objective blob runs, shared by several criteria.
fn full_runs() -> (Vec<TrainOutcome>, f64) {
    let t = Instant::now();
    let runs = SEEDS.iter().map(|&s| {
        let (cfg, ds) = blob_config(s);
        run(cfg, &ds)
    });
    let runs: Vec<TrainOutcome> = runs.collect();
    (runs, t.elapsed().as_secs_f64())
}

fn confident_predictions(r: &mut Report, runs: &[TrainOutcome], secs: f64) {
    let initial: Vec<f64> = runs.iter().map(|o| o.initial.confident_frac).collect();
    let last: Vec<f64> = runs.iter().map(|o| o.last().confident_frac).collect();
    let good = runs.iter().filter(|o| o.last().confident_frac >= 0.80 && o.last().confident_frac > o.initial.confident_frac).count();
    r.line(
        "confident predictions",
        good >= 4,
        secs,
        300.0,
        format!("fraction with max prob >= 0.9: initial [{}] -> final [{}]; {good}/5 seeds reach 0.80", fmt(&initial), fmt(&last)),
    );
}

fn convergence(r: &mut Report, runs: &[TrainOutcome], secs: f64) {
    let scores: Vec<_> = runs.iter().map(|o| o.last().scores.unwrap()).collect();
    let good = scores.iter().filter(|s| s.acc >= 0.95 && s.nmi >= 0.90).count();
    r.line(
        "end-to-end convergence",
        good >= 4,
        secs,
        300.0,
        format!(
            "ACC [{}] NMI [{}]; {good}/5 seeds meet ACC >= 0.95 and NMI >= 0.90",
            fmt(&scores.iter().map(|s| s.acc).collect::<Vec<_>>()),
            fmt(&scores.iter().map(|s| s.nmi).collect::<Vec<_>>())
        ),
    );
}

fn pseudo_graph_precision(r: &mut Report, runs: &[TrainOutcome]) {
    let first: Vec<f64> = runs.iter().map(|o| o.records[0].graph_bcubed.unwrap().0).collect();
    let last: Vec<f64> = runs.iter().map(|o| o.last().graph_bcubed.unwrap().0).collect();
    let rise = mean(&last) - mean(&first);
    r.line(
        "pseudo-graph precision rises",
        rise >= 0.05,
        0.0,
        1.0,
        format!("BCubed precision at 0.95, epoch 1 [{}] -> final [{}], mean rise {rise:.3} (>= 0.05)", fmt(&first), fmt(&last)),
    );
}

fn ablation(r: &mut Report, full: &[TrainOutcome], full_secs: f64) {
    let t = Instant::now();
    let mut means = Vec::new();
    for a in [Ablation::M1, Ablation::M2, Ablation::M3] {
        let accs: Vec<f64> = SEEDS
            .iter()
            .map(|&s| {
                let (cfg, ds) = blob_config(s);
                acc_of(&run(cfg.with_ablation(a), &ds))
            })
            .collect();
        means.push(mean(&accs));
    }
    means.push(mean(&full.iter().map(acc_of).collect::<Vec<_>>()));
    let [m1, m2, m3, m4] = [means[0], means[1], means[2], means[3]];
    let chain = m1 <= m2 + 0.02 && m2 + 0.02 <= m3 + 0.04 && m3 + 0.04 <= m4 + 0.04;
    let gain = m4 >= m1 + 0.02;
    r.line(
        "ablation trend",
        chain && gain,
        t.elapsed().as_secs_f64() + full_secs,
        1500.0,
        format!("mean ACC M1 {m1:.3} M2 {m2:.3} M3 {m3:.3} M4 {m4:.3}; chain holds: {chain}; M4 >= M1 + 0.02: {gain}"),
    );
}

fn threshold_sensitivity(r: &mut Report, full: &[TrainOutcome]) {
    let t = Instant::now();
    let low: Vec<f64> = SEEDS
        .iter()
        .map(|&s| {
            let (cfg, ds) = blob_config(s);
            acc_of(&run(ExperimentConfig { thres2: 0.5, ..cfg }, &ds))
        })
        .collect();
    let high: Vec<f64> = full.iter().map(acc_of).collect();
    let (mh, ml) = (mean(&high), mean(&low));
    r.line(
        "label threshold sensitivity",
        mh >= ml - 0.02,
        t.elapsed().as_secs_f64(),
        600.0,
        format!("mean ACC thres2=0.9 {mh:.3} vs thres2=0.5 {ml:.3}"),
    );
}

fn determinism(r: &mut Report) {
    let t = Instant::now();
    let (cfg, ds) = blob_config(11);
    let cfg = ExperimentConfig { epochs: 10, ..cfg };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let out = |i: usize, epochs: usize| ExperimentConfig { epochs, out_dir: Some(dirs[i].path().to_path_buf()), ..cfg.clone() };
    let a = run(out(0, 10), &ds);
    run(out(1, 10), &ds);
    let csv = |i: usize| std::fs::read(dirs[i].path().join("metrics.csv")).unwrap();
    let same_csv = csv(0) == csv(1);

    run(out(2, 4), &ds);
    let ckpt = Checkpoint::load(dirs[2].path().join("last.dccm")).unwrap();
    let mut trainer = Trainer::from_checkpoint(&ckpt, &ds).unwrap();
    trainer.set_epochs(10);
    let b = resume(trainer, &ds).unwrap();
    let same_params = a.trainer.encoder.params.checksum() == b.trainer.encoder.params.checksum()
        && a.trainer.discriminator.params.checksum() == b.trainer.discriminator.params.checksum();
    let same_resumed_csv = csv(2) == csv(0);
    r.line(
        "determinism and resume",
        same_csv && same_params && same_resumed_csv,
        t.elapsed().as_secs_f64(),
        120.0,
        format!("identical CSVs {same_csv}; 4+6 resume equals 10 epochs: params {same_params}, CSV {same_resumed_csv}"),
    );
}

/// Lloyd's algorithm with k-means++ seeding; labels of the best of 5 restarts.
fn nearest_centre_labels(x: &Tensor, k: usize, seed: u64) -> Vec<usize> {
    let (n, d) = (x.rows(), x.row_len());
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
    let mut best = (f64::INFINITY, vec![0; n]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..5 {
        let mut centres = vec![x.row(rng.random_range(0..n)).to_vec()];
        while centres.len() < k {
            let w: Vec<f64> = (0..n).map(|i| centres.iter().map(|c| dist(x.row(i), c)).fold(f64::INFINITY, f64::min)).collect();
            let mut u = rng.random_range(0.0..w.iter().sum::<f64>());
            let pick = w.iter().position(|&wi| {
                u -= wi;
                u <= 0.0
            });
            centres.push(x.row(pick.unwrap_or(n - 1)).to_vec());
        }
        let mut labels = vec![0; n];
        for _ in 0..100 {
            let new: Vec<usize> = (0..n)
                .map(|i| (0..k).min_by(|&a, &b| dist(x.row(i), &centres[a]).total_cmp(&dist(x.row(i), &centres[b]))).unwrap())
                .collect();
            let changed = new != labels;
            labels = new;
            for (c, centre) in centres.iter_mut().enumerate() {
                let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
                if !members.is_empty() {
                    *centre = (0..d).map(|j| members.iter().map(|&i| x.row(i)[j]).sum::<f64>() / members.len() as f64).collect();
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = (0..n).map(|i| dist(x.row(i), &centres[labels[i]])).sum();
        if inertia < best.0 {
            best = (inertia, labels);
        }
    }
    best.1
}

fn cifar_smoke() {
    let Some(dir) = std::env::var_os("DCCM_CIFAR_DIR").map(PathBuf::from) else {
        println!("SKIP real-data smoke: set DCCM_CIFAR_DIR to a folder of CIFAR-10 binary batches (non-blocking)");
        return;
    };
    let t = Instant::now();
    let paths: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).filter(|p| p.exists()).collect();
    let cfg = ExperimentConfig {
        dataset: DatasetSpec::Cifar { paths, classes: Some(vec![0, 1]), per_class: Some(500) },
        encoder: EncoderSpec::Conv { num_classes: 2 },
        epochs: 100,
        ..Default::default()
    };
    let ds = match cfg.dataset.load() {
        Ok(d) => d,
        Err(e) => {
            println!("FAIL real-data smoke: could not load CIFAR-10 from {}: {e}", dir.display());
            return;
        }
    };
    let truth = ds.ground_truth().unwrap().partition();
    let out = run(cfg, &ds);
    let z = predict(&out.trainer.encoder, &ds, 256).unwrap().z;
    let ours = nmi(&Partition::from_labels(&cluster_labels(&z)), &truth).unwrap();
    let flat = ds.samples().clone().reshape(vec![ds.len(), ds.sample_shape().iter().product()]).unwrap();
    let base = nmi(&Partition::from_labels(&nearest_centre_labels(&flat, 2, 0)), &truth).unwrap();
    // non-blocking: reported but not counted
    let secs = t.elapsed().as_secs_f64();
    let ok = ours > base && secs < 900.0;
    println!(
        "{} real-data smoke (non-blocking): NMI {ours:.3} vs nearest-centre baseline {base:.3} [{secs:.1}s, limit 900s]",
        if ok { "PASS" } else { "FAIL" }
    );
}

fn main() {
    let mut r = Report { failed: 0 };
    println!("PASS scope: full-scale image benchmarks need days of GPU time and are not attempted; the scaled-down checks below stand in for them");
    gradient_suite(&mut r);
    metric_oracles(&mut r);
    k_partition(&mut r);
    let (full, secs) = full_runs();
    confident_predictions(&mut r, &full, secs);
    convergence(&mut r, &full, secs);
    pseudo_graph_precision(&mut r, &full);
    ablation(&mut r, &full, secs);
    threshold_sensitivity(&mut r, &full);
    determinism(&mut r);
    cifar_smoke();
    println!("acceptance: {} criteria failed", r.failed);
}
