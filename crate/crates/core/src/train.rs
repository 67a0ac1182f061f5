//! The training loop: per-batch correlation mining and a joint RMSprop
//! update of encoder and discriminator.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{error, info, warn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{Checkpoint, NamedTensor, RngState, VERSION};
use crate::correlation::{
    assign_pseudo_labels, build_pseudo_graph, cosine_similarity, pseudo_graph_loss, pseudo_label_loss,
    sample_triplet_pairs, total_loss, triplet_mi_loss, LossBreakdown, PseudoGraph, SimilarityMatrix,
};
use crate::data::{minibatches_with, Dataset};
use crate::error::{Error, Result};
use crate::evaluate::{bcubed_of_predictions, cluster_labels, confident_fraction, predict, score_labels, spread_indices};
use crate::experiment::ExperimentConfig;
use crate::graph_analysis::BCubedPoint;
use crate::metrics::{bcubed_relation, ClusteringScores, Partition};
use crate::model::{DiscriminatorState, EncoderState};
use crate::optim::RmsProp;
use crate::robustness::{apply_transform, feature_invariance_loss, TransformSpec};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str =
    "epoch,loss_total,loss_pg,loss_pg_t,loss_pl,loss_pl_t,loss_mi,nmi,acc,ari,selected_label_frac,positive_pair_frac";
pub const DIAGNOSTICS_HEADER: &str =
    "epoch,nmi,acc,ari,bcubed_p,bcubed_r,confident_frac,graph_bcubed_p,graph_bcubed_r";

const ENCODER_PREFIX: &str = "enc";
const DISC_PREFIX: &str = "disc";

/// What happened in one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossBreakdown,
    /// The pseudo-graph that supervised this step.
    pub graph: PseudoGraph,
    /// Fraction of the batch admitted as confident pseudo-labels.
    pub selected_frac: f64,
    /// Fraction of ordered off-diagonal pairs linked in the pseudo-graph.
    pub positive_frac: f64,
    pub mi_skipped: bool,
}

/// One row of per-epoch metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Step averages; `None` for the pre-training evaluation.
    pub losses: Option<LossBreakdown>,
    pub scores: Option<ClusteringScores>,
    pub selected_label_frac: f64,
    pub positive_pair_frac: f64,
    /// Fraction of the dataset predicted with probability at least 0.9.
    pub confident_frac: f64,
    /// BCubed of the `thres1` similarity relation over the dataset, on
    /// diagnostic epochs.
    pub bcubed: Option<BCubedPoint>,
    /// BCubed `(precision, recall)` of the minibatch pseudo-graphs used
    /// during the epoch, averaged over batches.
    pub graph_bcubed: Option<(f64, f64)>,
}

fn opt_field(out: &mut String, v: Option<f64>) {
    match v {
        Some(v) => {
            let _ = write!(out, ",{v}");
        }
        None => out.push(','),
    }
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let mut s = format!("{}", self.epoch);
        let l = self.losses.unwrap_or_default();
        for v in [l.total, l.l_pg, l.l_pg_prime, l.l_pl, l.l_pl_prime, l.l_mi] {
            let _ = write!(s, ",{v}");
        }
        opt_field(&mut s, self.scores.map(|c| c.nmi));
        opt_field(&mut s, self.scores.map(|c| c.acc));
        opt_field(&mut s, self.scores.map(|c| c.ari));
        let _ = write!(s, ",{},{}", self.selected_label_frac, self.positive_pair_frac);
        s
    }

    pub fn diagnostics_row(&self) -> Option<String> {
        let b = self.bcubed?;
        let mut s = format!("{}", self.epoch);
        opt_field(&mut s, self.scores.map(|c| c.nmi));
        opt_field(&mut s, self.scores.map(|c| c.acc));
        opt_field(&mut s, self.scores.map(|c| c.ari));
        let _ = write!(s, ",{},{},{}", b.precision, b.recall, self.confident_frac);
        opt_field(&mut s, self.graph_bcubed.map(|g| g.0));
        opt_field(&mut s, self.graph_bcubed.map(|g| g.1));
        Some(s)
    }
}

/// Perturbation for the robustness branch when the config leaves it open.
pub fn resolve_transform(config: &ExperimentConfig, data: &Dataset) -> TransformSpec {
    if let Some(t) = &config.transform {
        return t.clone();
    }
    if data.sample_shape().len() == 3 {
        return TransformSpec::default();
    }
    let v = data.samples().data();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    TransformSpec::noise(0.1 * sd.max(1e-12))
}

/// Encoder, discriminator, optimizer and random stream of a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: ExperimentConfig,
    pub encoder: EncoderState,
    pub discriminator: DiscriminatorState,
    optimizer: RmsProp,
    transform: TransformSpec,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: ExperimentConfig, data: &Dataset) -> Result<Self> {
        config.validate()?;
        let enc_cfg = config.encoder.resolve(data.sample_shape(), config.derived_seed(1))?;
        let discriminator =
            DiscriminatorState::for_encoder(&enc_cfg, config.discriminator_hidden, config.derived_seed(2))?;
        let mut encoder = EncoderState::init(enc_cfg)?;
        if config.init_samples > 0 {
            let idx = spread_indices(data.len(), config.init_samples.max(2));
            encoder.data_init(&data.batch(&idx))?;
        }
        let optimizer = RmsProp::new(config.learning_rate, config.rmsprop_decay, config.rmsprop_eps)?;
        let transform = resolve_transform(&config, data);
        transform.validate()?;
        if config.toggles.use_robustness && transform.is_geometric() && data.sample_shape().len() != 3 {
            return Err(Error::Config("geometric transforms need [C, H, W] samples".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(config.derived_seed(3));
        Ok(Trainer { config, encoder, discriminator, optimizer, transform, rng, epoch: 0 })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn optimizer(&self) -> &RmsProp {
        &self.optimizer
    }

    pub fn transform(&self) -> &TransformSpec {
        &self.transform
    }

    /// Extends the run to `epochs` in total.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    /// Redirects metrics and checkpoints of later epochs.
    pub fn set_out_dir(&mut self, dir: Option<PathBuf>) {
        self.config.out_dir = dir;
    }

    /// One minibatch step. Pseudo-graph, pseudo-labels and triplet pairs are
    /// computed from the detached predictions of this batch.
    pub fn step(&mut self, x: &Tensor) -> Result<StepReport> {
        let cfg = &self.config;
        let toggles = cfg.toggles;
        let transform_seed = self.rng.next_u64();
        let pair_seed = self.rng.next_u64();
        let b = x.shape()[0];

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.encoder.forward(&mut g, xv)?;
        let z = g.value(out.z)?.clone();
        let s_fixed = SimilarityMatrix::of(&z)?;
        let w = build_pseudo_graph(&s_fixed, cfg.thres1)?;
        let labels = assign_pseudo_labels(&z, cfg.thres2)?;

        let mut parts = LossBreakdown { alpha: cfg.alpha, beta: cfg.beta, gamma: cfg.gamma, ..Default::default() };
        let mut terms: Vec<(Var, f64)> = Vec::new();

        let s = cosine_similarity(&mut g, out.z)?;
        let l_pg = pseudo_graph_loss(&mut g, s, &w)?;
        terms.push((l_pg, 1.0));
        let mut l_pl = None;
        if toggles.use_pseudo_label {
            let v = pseudo_label_loss(&mut g, out.z, &labels)?;
            terms.push((v, cfg.alpha));
            l_pl = Some(v);
        }
        let (mut l_pg_t, mut l_pl_t, mut l_fi) = (None, None, None);
        if toggles.use_robustness {
            let spec = TransformSpec { seed: transform_seed, ..self.transform.clone() };
            let xt = apply_transform(x, &spec)?;
            let xtv = g.constant(xt.x);
            let out_t = self.encoder.forward(&mut g, xtv)?;
            let s_t = cosine_similarity(&mut g, out_t.z)?;
            let v = pseudo_graph_loss(&mut g, s_t, &w)?;
            terms.push((v, 1.0));
            l_pg_t = Some(v);
            if toggles.use_pseudo_label {
                let v = pseudo_label_loss(&mut g, out_t.z, &labels)?;
                terms.push((v, cfg.alpha));
                l_pl_t = Some(v);
            }
            if toggles.use_feature_invariance {
                let v = feature_invariance_loss(&mut g, out.z, out_t.z)?;
                terms.push((v, cfg.gamma));
                l_fi = Some(v);
            }
        }
        let mut l_mi = None;
        let mut mi_skipped = false;
        if toggles.use_mi {
            let n = cfg.mi_pairs.unwrap_or(b).min(b);
            match sample_triplet_pairs(&w, &s_fixed, cfg.sampling, n, pair_seed) {
                Ok(pairs) => {
                    let v = triplet_mi_loss(&mut g, &self.discriminator, out.d, out.s, &pairs)?;
                    terms.push((v, cfg.beta));
                    l_mi = Some(v);
                }
                Err(Error::DegenerateBatch(msg)) => {
                    info!("epoch {}: mutual-information term skipped: {msg}", self.epoch + 1);
                    mi_skipped = true;
                }
                Err(e) => return Err(e),
            }
        }

        let mut total = None;
        for (v, weight) in terms {
            let t = if weight == 1.0 { v } else { g.scale(v, weight)? };
            total = Some(match total {
                None => t,
                Some(acc) => g.add(acc, t)?,
            });
        }
        let total = total.expect("pseudo-graph term is always present");

        let read = |g: &Graph, v: Option<Var>| -> Result<f64> { v.map_or(Ok(0.0), |v| g.value(v)?.item()) };
        parts.l_pg = read(&g, Some(l_pg))?;
        parts.l_pl = read(&g, l_pl)?;
        parts.l_pg_prime = read(&g, l_pg_t)?;
        parts.l_pl_prime = read(&g, l_pl_t)?;
        parts.l_mi = read(&g, l_mi)?;
        parts.l_fi = read(&g, l_fi)?;
        parts.total = g.value(total)?.item()?;
        if let Err(e) = total_loss(&parts).and_then(|t| {
            if parts.total.is_finite() {
                Ok(t)
            } else {
                Err(Error::Divergence { component: "total".into(), value: parts.total })
            }
        }) {
            error!("non-finite loss at epoch {}: {parts:?}", self.epoch + 1);
            return Err(e);
        }

        let grads = g.backward(total)?;
        self.encoder.params.absorb(&grads);
        self.discriminator.params.absorb(&grads);
        self.optimizer.step_all(&mut [
            (ENCODER_PREFIX, &mut self.encoder.params),
            (DISC_PREFIX, &mut self.discriminator.params),
        ])?;
        Ok(StepReport {
            losses: parts,
            selected_frac: labels.num_selected() as f64 / b as f64,
            positive_frac: w.positive_fraction(),
            graph: w,
            mi_skipped,
        })
    }

    /// Shuffles the data, steps through every minibatch and evaluates.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochRecord> {
        let bs = self.config.batch_size.min(data.len());
        let batches = minibatches_with(data.len(), bs, &mut self.rng)?;
        let mut sum = LossBreakdown::default();
        let (mut sel, mut pos) = (0.0, 0.0);
        let mut graph_bc = data.ground_truth().map(|_| (0.0, 0.0));
        for idx in &batches {
            let r = self.step(&data.batch(idx))?;
            if let (Some(acc), Some(t)) = (graph_bc.as_mut(), data.ground_truth()) {
                let truth = Partition::from_labels(&idx.iter().map(|&i| t.labels()[i]).collect::<Vec<_>>());
                let (p, rc) = bcubed_relation(idx.len(), |i, j| r.graph.edge(i, j), &truth)?;
                acc.0 += p;
                acc.1 += rc;
            }
            let l = r.losses;
            sum.l_pg += l.l_pg;
            sum.l_pg_prime += l.l_pg_prime;
            sum.l_pl += l.l_pl;
            sum.l_pl_prime += l.l_pl_prime;
            sum.l_mi += l.l_mi;
            sum.l_fi += l.l_fi;
            sum.total += l.total;
            sel += r.selected_frac;
            pos += r.positive_frac;
        }
        let k = batches.len() as f64;
        let mean = LossBreakdown {
            l_pg: sum.l_pg / k,
            l_pg_prime: sum.l_pg_prime / k,
            l_pl: sum.l_pl / k,
            l_pl_prime: sum.l_pl_prime / k,
            l_mi: sum.l_mi / k,
            l_fi: sum.l_fi / k,
            total: sum.total / k,
            alpha: self.config.alpha,
            beta: self.config.beta,
            gamma: self.config.gamma,
        };
        self.epoch += 1;
        let mut rec = self.measure(data)?;
        rec.losses = Some(mean);
        rec.selected_label_frac = sel / k;
        rec.positive_pair_frac = pos / k;
        rec.graph_bcubed = graph_bc.map(|(p, r)| (p / k, r / k));
        Ok(rec)
    }

    fn diagnostic_epoch(&self) -> bool {
        let e = self.epoch;
        let every = self.config.eval.bcubed_every;
        e <= 1 || e == self.config.epochs || (every > 0 && e % every == 0)
    }

    /// Inference-mode metrics over the full dataset at the current epoch.
    pub fn measure(&self, data: &Dataset) -> Result<EpochRecord> {
        let pred = predict(&self.encoder, data, self.config.eval.chunk)?;
        let labels = cluster_labels(&pred.z);
        let scores = data.ground_truth().map(|t| score_labels(&labels, t)).transpose()?;
        let bcubed = match data.ground_truth() {
            Some(t) if self.diagnostic_epoch() => {
                bcubed_of_predictions(&pred.z, t, &[self.config.thres1], self.config.eval.bcubed_max_samples)?
                    .first()
                    .copied()
            }
            _ => None,
        };
        let conf = assign_pseudo_labels(&pred.z, self.config.thres2)?;
        Ok(EpochRecord {
            epoch: self.epoch,
            losses: None,
            scores,
            selected_label_frac: conf.num_selected() as f64 / conf.len() as f64,
            positive_pair_frac: 0.0,
            confident_frac: confident_fraction(&pred.z, 0.9),
            bcubed,
            graph_bcubed: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let named = |prefix: &str, store: &crate::autodiff::ParamStore| -> Vec<NamedTensor> {
            store
                .iter()
                .map(|p| NamedTensor { name: format!("{prefix}.{}", p.name), tensor: p.value.clone() })
                .collect()
        };
        let mut params = named(ENCODER_PREFIX, &self.encoder.params);
        params.extend(named(DISC_PREFIX, &self.discriminator.params));
        Checkpoint {
            version: VERSION,
            config_json: self.config.to_json(),
            params,
            optimizer: self.optimizer.export(),
            epoch: self.epoch as u64,
            rng: RngState::capture(&self.rng),
        }
    }

    /// Rebuilds a trainer from a checkpoint; `data` must be the dataset the
    /// run was started on.
    pub fn from_checkpoint(ckpt: &Checkpoint, data: &Dataset) -> Result<Self> {
        let config = ExperimentConfig::from_json(&ckpt.config_json)?;
        let mut t = Trainer::new(config, data)?;
        let mut seen = 0;
        for nt in &ckpt.params {
            let (prefix, name) = nt
                .name
                .split_once('.')
                .ok_or_else(|| Error::Format(format!("parameter name {} lacks a prefix", nt.name)))?;
            let store = match prefix {
                ENCODER_PREFIX => &mut t.encoder.params,
                DISC_PREFIX => &mut t.discriminator.params,
                _ => return Err(Error::Format(format!("unknown parameter group in {}", nt.name))),
            };
            let p = store
                .iter_mut()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint parameter {} not in model", nt.name)))?;
            if p.value.shape() != nt.tensor.shape() {
                return Err(Error::Format(format!(
                    "{}: checkpoint shape {:?} vs model {:?}",
                    nt.name,
                    nt.tensor.shape(),
                    p.value.shape()
                )));
            }
            p.value = nt.tensor.clone();
            seen += 1;
        }
        let expected = t.encoder.params.len() + t.discriminator.params.len();
        if seen != expected {
            return Err(Error::Format(format!("checkpoint holds {seen} parameters, model has {expected}")));
        }
        t.optimizer.import(&ckpt.optimizer)?;
        t.epoch = ckpt.epoch as usize;
        t.rng = ckpt.rng.restore();
        Ok(t)
    }
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    /// Metrics of the untrained model (epoch 0).
    pub initial: EpochRecord,
    pub records: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.records)
    }

    pub fn last(&self) -> &EpochRecord {
        self.records.last().unwrap_or(&self.initial)
    }
}

pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Files written under the output directory.
struct Sink {
    dir: PathBuf,
}

impl Sink {
    fn open(dir: &Path, config: &ExperimentConfig, fresh: bool) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), config.to_json())?;
        for (file, header) in [("metrics.csv", METRICS_HEADER), ("diagnostics.csv", DIAGNOSTICS_HEADER)] {
            let p = dir.join(file);
            if fresh || !p.exists() {
                fs::write(&p, format!("{header}\n"))?;
            }
        }
        Ok(Sink { dir: dir.to_path_buf() })
    }

    fn append(&self, file: &str, line: &str) -> Result<()> {
        let mut f = OpenOptions::new().append(true).open(self.dir.join(file))?;
        writeln!(f, "{line}")?;
        Ok(())
    }
}

/// Trains from scratch for `config.epochs` epochs, writing metrics and
/// checkpoints under `config.out_dir` when one is set.
pub fn train(config: ExperimentConfig, data: &Dataset) -> Result<TrainOutcome> {
    let trainer = Trainer::new(config, data)?;
    run(trainer, data, true)
}

/// Continues a trainer until its configured epoch count.
pub fn resume(trainer: Trainer, data: &Dataset) -> Result<TrainOutcome> {
    run(trainer, data, false)
}

fn run(mut trainer: Trainer, data: &Dataset, fresh: bool) -> Result<TrainOutcome> {
    let sink = match &trainer.config.out_dir {
        Some(d) => Some(Sink::open(d, &trainer.config, fresh)?),
        None => None,
    };
    let initial = trainer.measure(data)?;
    let mut records = Vec::new();
    let every = trainer.config.checkpoint_every;
    while trainer.epoch < trainer.config.epochs {
        let rec = match trainer.train_epoch(data) {
            Ok(r) => r,
            Err(e) => {
                if sink.is_some() {
                    warn!("training aborted; the last saved checkpoint is kept");
                }
                return Err(e);
            }
        };
        if let Some(s) = &sink {
            s.append("metrics.csv", &rec.csv_row())?;
            if let Some(row) = rec.diagnostics_row() {
                s.append("diagnostics.csv", &row)?;
            }
            if every > 0 && trainer.epoch % every == 0 {
                trainer.checkpoint().save(s.dir.join("last.dccm"))?;
            }
        }
        match rec.scores {
            Some(sc) => info!(
                "epoch {} loss {:.5} nmi {:.4} acc {:.4} ari {:.4}",
                rec.epoch,
                rec.losses.map_or(f64::NAN, |l| l.total),
                sc.nmi,
                sc.acc,
                sc.ari
            ),
            None => info!("epoch {} loss {:.5}", rec.epoch, rec.losses.map_or(f64::NAN, |l| l.total)),
        }
        records.push(rec);
    }
    if let Some(s) = &sink {
        trainer.checkpoint().save(s.dir.join("final.dccm"))?;
    }
    Ok(TrainOutcome { trainer, initial, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blobs, BlobsSpec};
    use crate::experiment::{Ablation, DatasetSpec};

    fn small() -> (ExperimentConfig, Dataset) {
        let spec = BlobsSpec { per_cluster: 8, ..Default::default() };
        let cfg = ExperimentConfig {
            dataset: DatasetSpec::Blobs(spec.clone()),
            epochs: 2,
            batch_size: 16,
            ..Default::default()
        };
        (cfg, generate_blobs(&spec).unwrap())
    }

    #[test]
    fn smoke_epoch_has_finite_losses() {
        let (cfg, ds) = small();
        let mut t = Trainer::new(cfg, &ds).unwrap();
        let rec = t.train_epoch(&ds).unwrap();
        let l = rec.losses.unwrap();
        assert!(total_loss(&l).unwrap().is_finite());
        assert_eq!(rec.epoch, 1);
        assert!(rec.bcubed.is_some());
    }

    #[test]
    fn toggles_select_loss_terms() {
        let (cfg, ds) = small();
        let x = ds.batch(&(0..16).collect::<Vec<_>>());
        for a in Ablation::ALL {
            let mut t = Trainer::new(cfg.clone().with_ablation(a), &ds).unwrap();
            let l = t.step(&x).unwrap().losses;
            let tg = a.toggles();
            assert!(l.l_pg > 0.0);
            assert_eq!(l.l_pg_prime > 0.0, tg.use_robustness, "{a:?}");
            assert_eq!(l.l_mi > 0.0, tg.use_mi, "{a:?}");
            if !tg.use_pseudo_label {
                assert_eq!((l.l_pl, l.l_pl_prime), (0.0, 0.0));
            }
        }
    }

    #[test]
    fn csv_rows_match_header() {
        let (cfg, ds) = small();
        let out = train(cfg, &ds).unwrap();
        let csv = out.metrics_csv();
        let cols = METRICS_HEADER.split(',').count();
        assert!(csv.lines().all(|l| l.split(',').count() == cols));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn checkpoint_round_trip_restores_state() {
        let (cfg, ds) = small();
        let mut t = Trainer::new(cfg, &ds).unwrap();
        t.train_epoch(&ds).unwrap();
        let c = t.checkpoint();
        let back = Trainer::from_checkpoint(&Checkpoint::decode(&c.encode()).unwrap(), &ds).unwrap();
        assert_eq!(back.encoder.params.checksum(), t.encoder.params.checksum());
        assert_eq!(back.optimizer, t.optimizer);
        assert_eq!(back.epoch, 1);
    }
}
