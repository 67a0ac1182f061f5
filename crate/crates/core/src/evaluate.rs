//! Full-dataset evaluation and the linear-probe protocol.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore};
use crate::correlation::{argmax_rows, SimilarityMatrix};
use crate::data::{minibatches_with, Dataset, GroundTruth};
use crate::error::{Error, Result};
use crate::experiment::EvalSettings;
use crate::graph_analysis::{bcubed_curve, concentration_histogram, BCubedPoint, ConcentrationHistogram};
use crate::metrics::{score_all, ClusteringScores, Partition};
use crate::model::{scaled_uniform, EncoderState};
use crate::optim::RmsProp;
use crate::tensor::Tensor;

/// Encoder outputs over a whole dataset.
#[derive(Clone, Debug)]
pub struct Predictions {
    /// `[N, K]` softmax predictions.
    pub z: Tensor,
    /// `[N, D]` deep features.
    pub deep: Tensor,
    /// `[N, F]` inputs of the prediction layer.
    pub penultimate: Tensor,
}

fn stack(parts: Vec<Tensor>) -> Result<Tensor> {
    let width = parts[0].row_len();
    let rows: usize = parts.iter().map(|t| t.shape()[0]).sum();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![rows, width], data)
}

/// Runs the encoder over `data` in chunks of `chunk` samples.
pub fn predict(encoder: &EncoderState, data: &Dataset, chunk: usize) -> Result<Predictions> {
    if data.is_empty() {
        return Err(Error::DegenerateInput("cannot predict on an empty dataset".into()));
    }
    let chunk = chunk.max(1);
    let (mut zs, mut ds, mut ps) = (Vec::new(), Vec::new(), Vec::new());
    let idx: Vec<usize> = (0..data.len()).collect();
    for c in idx.chunks(chunk) {
        let mut g = Graph::new();
        let x = g.constant(data.batch(c));
        let out = encoder.forward(&mut g, x)?;
        zs.push(g.value(out.z)?.clone());
        ds.push(g.value(out.d)?.clone());
        ps.push(g.value(out.penultimate)?.clone());
    }
    Ok(Predictions { z: stack(zs)?, deep: stack(ds)?, penultimate: stack(ps)? })
}

/// Cluster assignment: argmax of each prediction row.
pub fn cluster_labels(z: &Tensor) -> Vec<usize> {
    argmax_rows(z).into_iter().map(|(j, _)| j).collect()
}

/// NMI, ACC and ARI of predicted labels against ground truth.
pub fn score_labels(labels: &[usize], truth: &GroundTruth) -> Result<ClusteringScores> {
    if labels.len() != truth.len() {
        return Err(Error::LengthMismatch { left: labels.len(), right: truth.len() });
    }
    score_all(&Partition::from_labels(labels), &truth.partition())
}

/// Fraction of rows whose largest entry is at least `level`.
pub fn confident_fraction(z: &Tensor, level: f64) -> f64 {
    let rows = argmax_rows(z);
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|&&(_, p)| p >= level).count() as f64 / rows.len() as f64
}

/// Evenly spaced indices, at most `cap` of them.
pub fn spread_indices(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    (0..cap).map(|i| i * n / cap).collect()
}

/// BCubed of the similarity-threshold relation on (a spread subset of) the
/// predictions.
pub fn bcubed_of_predictions(
    z: &Tensor,
    truth: &GroundTruth,
    thresholds: &[f64],
    cap: usize,
) -> Result<Vec<BCubedPoint>> {
    let idx = spread_indices(z.shape()[0], cap.max(2));
    let sub = z.select(&idx);
    let labels: Vec<usize> = idx.iter().map(|&i| truth.labels()[i]).collect();
    bcubed_curve(&SimilarityMatrix::of(&sub)?, &Partition::from_labels(&labels), thresholds)
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub labels: Vec<usize>,
    pub scores: Option<ClusteringScores>,
    pub bcubed: Vec<BCubedPoint>,
    pub histogram: ConcentrationHistogram,
    /// Fraction of samples predicted with probability at least 0.9.
    pub confident_frac: f64,
    /// `sample_id,d0..,label` rows for external plotting.
    pub embeddings_csv: String,
}

pub fn embeddings_csv(deep: &Tensor, labels: &[usize]) -> String {
    let width = deep.row_len();
    let mut out = String::from("sample_id");
    for j in 0..width {
        let _ = write!(out, ",d{j}");
    }
    out.push_str(",label\n");
    for (i, (row, l)) in deep.data().chunks(width).zip(labels).enumerate() {
        let _ = write!(out, "{i}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{l}");
    }
    out
}

/// Predicts every sample and, when ground truth exists, scores the result.
pub fn evaluate(encoder: &EncoderState, data: &Dataset, settings: &EvalSettings) -> Result<EvalReport> {
    let pred = predict(encoder, data, settings.chunk)?;
    let labels = cluster_labels(&pred.z);
    let (scores, bcubed) = match data.ground_truth() {
        Some(t) => (
            Some(score_labels(&labels, t)?),
            bcubed_of_predictions(&pred.z, t, &settings.bcubed_thresholds, settings.bcubed_max_samples)?,
        ),
        None => {
            debug!("dataset {} has no ground truth; metrics omitted", data.name);
            (None, Vec::new())
        }
    };
    Ok(EvalReport {
        histogram: concentration_histogram(&pred.z),
        confident_frac: confident_fraction(&pred.z, 0.9),
        embeddings_csv: embeddings_csv(&pred.deep, &labels),
        labels,
        scores,
        bcubed,
    })
}

/// Which frozen representation the probe classifies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeFeature {
    DeepTap,
    PredictionInput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSettings {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings { hidden: 200, epochs: 50, batch_size: 64, learning_rate: 1e-3, seed: 0 }
    }
}

/// Trains a one-hidden-layer classifier on the frozen encoder's features of
/// `train` and returns its top-1 accuracy on `test`.
pub fn probe(
    encoder: &EncoderState,
    train: &Dataset,
    test: &Dataset,
    feature: ProbeFeature,
    settings: &ProbeSettings,
) -> Result<f64> {
    let (Some(ty), Some(sy)) = (train.ground_truth(), test.ground_truth()) else {
        return Err(Error::Contract("probe needs ground truth on both splits".into()));
    };
    let pick = |p: Predictions| match feature {
        ProbeFeature::DeepTap => p.deep,
        ProbeFeature::PredictionInput => p.penultimate,
    };
    let tx = pick(predict(encoder, train, 256)?);
    let sx = pick(predict(encoder, test, 256)?);
    probe_features(&tx, ty.labels(), &sx, sy.labels(), settings)
}

/// The probe classifier on explicit feature matrices.
pub fn probe_features(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    settings: &ProbeSettings,
) -> Result<f64> {
    let a: BTreeSet<usize> = train_y.iter().copied().collect();
    let b: BTreeSet<usize> = test_y.iter().copied().collect();
    if a != b {
        return Err(Error::Contract(format!("label sets differ: train {a:?}, test {b:?}")));
    }
    if train_x.rank() != 2 || test_x.rank() != 2 || train_x.row_len() != test_x.row_len() {
        return Err(Error::dim("probe", format!("features {:?} vs {:?}", train_x.shape(), test_x.shape())));
    }
    if train_x.shape()[0] != train_y.len() || test_x.shape()[0] != test_y.len() {
        return Err(Error::LengthMismatch { left: train_x.shape()[0], right: train_y.len() });
    }
    let classes = a.iter().max().map_or(0, |m| m + 1);
    let f = train_x.row_len();

    // standardize with training statistics
    let n = train_y.len() as f64;
    let mut mean = vec![0.0; f];
    let mut sd = vec![0.0; f];
    for row in train_x.data().chunks(f) {
        row.iter().zip(&mut mean).for_each(|(v, m)| *m += v / n);
    }
    for row in train_x.data().chunks(f) {
        row.iter().zip(&mean).zip(&mut sd).for_each(|((v, m), s)| *s += (v - m).powi(2) / n);
    }
    sd.iter_mut().for_each(|s| *s = s.sqrt().max(1e-8));
    let standardize = |t: &Tensor| -> Tensor {
        let mut t = t.clone();
        for row in t.data_mut().chunks_mut(f) {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&sd) {
                *v = (*v - m) / s;
            }
        }
        t
    };
    let (train_x, test_x) = (standardize(train_x), standardize(test_x));

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let h = settings.hidden.max(1);
    let mut params = ParamStore::new();
    let w1 = params.push("probe0.weight", scaled_uniform(&mut rng, &[f, h], f, h));
    let b1 = params.push("probe0.bias", Tensor::zeros(&[h]));
    let w2 = params.push("probe1.weight", scaled_uniform(&mut rng, &[h, classes], h, classes));
    let b2 = params.push("probe1.bias", Tensor::zeros(&[classes]));
    let logits = |g: &mut Graph, params: &ParamStore, x: Tensor| -> Result<crate::autodiff::Var> {
        let x = g.constant(x);
        let (w1, b1, w2, b2) = (params.bind(g, w1), params.bind(g, b1), params.bind(g, w2), params.bind(g, b2));
        let hdn = g.matmul(x, w1)?;
        let hdn = g.add_row_bias(hdn, b1)?;
        let hdn = g.relu(hdn)?;
        let out = g.matmul(hdn, w2)?;
        g.add_row_bias(out, b2)
    };

    let mut opt = RmsProp::new(settings.learning_rate, 0.99, 1e-8)?;
    let bs = settings.batch_size.clamp(2, train_y.len().max(2)).min(train_y.len());
    if bs < 2 {
        return Err(Error::DegenerateInput("probe needs at least two training samples".into()));
    }
    for _ in 0..settings.epochs {
        for idx in minibatches_with(train_y.len(), bs, &mut rng)? {
            let mut g = Graph::new();
            let out = logits(&mut g, &params, train_x.select(&idx))?;
            let p = g.softmax(out)?;
            let p = g.clamp(p, 1e-12, 1.0)?;
            let lp = g.log(p)?;
            let picked = g.gather_cols(lp, idx.iter().map(|&i| train_y[i]).collect())?;
            let m = g.mean(picked)?;
            let loss = g.scale(m, -1.0)?;
            let grads = g.backward(loss)?;
            params.absorb(&grads);
            opt.step("probe", &mut params)?;
        }
    }
    let mut g = Graph::new();
    let out = logits(&mut g, &params, test_x)?;
    let pred = cluster_labels(g.value(out)?);
    let hits = pred.iter().zip(test_y).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / test_y.len() as f64)
}
