//! Correlation supervision mined from the network's own predictions.
//!
//! Every minibatch, detached softmax predictions yield a thresholded cosine
//! similarity graph and confident argmax labels. These targets drive a binary
//! cross-entropy graph loss, a masked cross-entropy label loss, and the
//! selection of positive and negative `(deep, shallow)` feature pairs for a
//! Jensen-Shannon mutual-information loss.

use log::debug;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::DiscriminatorState;
use crate::tensor::Tensor;

/// Clamp applied to probabilities before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-7;

/// Dense `B x B` cosine similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    size: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 || t.shape()[0] != t.shape()[1] {
            return Err(Error::dim("similarity", format!("not square: {:?}", t.shape())));
        }
        Ok(SimilarityMatrix { size: t.shape()[0], values: t.data().to_vec() })
    }

    /// Cosine similarities of the rows of `z`, without recording a graph.
    pub fn of(z: &Tensor) -> Result<Self> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let s = cosine_similarity(&mut g, zv)?;
        Self::from_tensor(g.value(s)?)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.size, self.size], self.values.clone()).expect("square")
    }
}

/// `S_ij = z_i . z_j / (|z_i| |z_j|)`, recorded on `g`.
pub fn cosine_similarity(g: &mut Graph, z: Var) -> Result<Var> {
    let zs = g.value(z)?.shape().to_vec();
    if zs.len() != 2 {
        return Err(Error::dim("cosine_similarity", format!("expected [B, K], got {zs:?}")));
    }
    let b = zs[0];
    let norms = g.l2_norm_rows(z)?;
    if let Some(i) = g.value(norms)?.data().iter().position(|&n| n == 0.0) {
        return Err(Error::DegenerateInput(format!("row {i} has zero norm")));
    }
    let zt = g.transpose(z)?;
    let dots = g.matmul(z, zt)?;
    let col = g.reshape(norms, vec![b, 1])?;
    let row = g.reshape(norms, vec![1, b])?;
    let outer = g.matmul(col, row)?;
    g.div(dots, outer)
}

/// Binary co-membership graph over a minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoGraph {
    size: usize,
    edges: Vec<bool>,
    pub thres1: f64,
}

impl PseudoGraph {
    pub fn from_edges(size: usize, edges: Vec<bool>, thres1: f64) -> Result<Self> {
        if edges.len() != size * size {
            return Err(Error::LengthMismatch { left: edges.len(), right: size * size });
        }
        Ok(PseudoGraph { size, edges, thres1 })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn edge(&self, i: usize, j: usize) -> bool {
        self.edges[i * self.size + j]
    }

    /// Number of ordered off-diagonal pairs marked as positives.
    pub fn positive_pairs(&self) -> usize {
        (0..self.size)
            .map(|i| (0..self.size).filter(|&j| j != i && self.edge(i, j)).count())
            .sum()
    }

    /// Fraction of ordered off-diagonal pairs marked as positives.
    pub fn positive_fraction(&self) -> f64 {
        let pairs = self.size * self.size.saturating_sub(1);
        if pairs == 0 {
            return 0.0;
        }
        self.positive_pairs() as f64 / pairs as f64
    }
}

fn check_unit_interval(name: &str, t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Config(format!("{name} must lie in (0, 1), got {t}")));
    }
    Ok(())
}

/// `W_ij = 1` iff `S_ij >= thres1`. The result carries no gradient.
pub fn build_pseudo_graph(s: &SimilarityMatrix, thres1: f64) -> Result<PseudoGraph> {
    check_unit_interval("thres1", thres1)?;
    let n = s.size();
    let mut edges = vec![false; n * n];
    for i in 0..n {
        edges[i * n + i] = true;
        for j in i + 1..n {
            let e = s.get(i, j) >= thres1;
            edges[i * n + j] = e;
            edges[j * n + i] = e;
        }
    }
    Ok(PseudoGraph { size: n, edges, thres1 })
}

/// Argmax labels, their confidence, and the confident-selection mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
    pub selected: Vec<bool>,
    pub thres2: f64,
}

impl PseudoLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_selected(&self) -> usize {
        self.selected.iter().filter(|&&v| v).count()
    }
}

/// Row-wise argmax (lowest index on ties) and its value.
pub fn argmax_rows(z: &Tensor) -> Vec<(usize, f64)> {
    let k = z.row_len();
    z.data()
        .chunks(k)
        .map(|row| {
            row.iter().enumerate().fold((0, row[0]), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
        })
        .collect()
}

pub fn assign_pseudo_labels(z: &Tensor, thres2: f64) -> Result<PseudoLabels> {
    check_unit_interval("thres2", thres2)?;
    if z.rank() != 2 {
        return Err(Error::dim("pseudo_labels", format!("expected [B, K], got {:?}", z.shape())));
    }
    let (labels, confidence): (Vec<usize>, Vec<f64>) = argmax_rows(z).into_iter().unzip();
    let selected = confidence.iter().map(|&p| p >= thres2).collect();
    Ok(PseudoLabels { labels, confidence, selected, thres2 })
}

fn off_diagonal_masks(w: &PseudoGraph) -> (Tensor, Tensor) {
    let n = w.size();
    let mut pos = vec![0.0; n * n];
    let mut neg = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if w.edge(i, j) {
                pos[i * n + j] = 1.0;
            } else {
                neg[i * n + j] = 1.0;
            }
        }
    }
    (
        Tensor::new(vec![n, n], pos).expect("square"),
        Tensor::new(vec![n, n], neg).expect("square"),
    )
}

/// Binary cross-entropy between similarities and graph edges, averaged over
/// all ordered off-diagonal pairs.
pub fn pseudo_graph_loss(g: &mut Graph, s: Var, w: &PseudoGraph) -> Result<Var> {
    let shape = g.value(s)?.shape().to_vec();
    let n = w.size();
    if shape != [n, n] {
        return Err(Error::dim("pseudo_graph_loss", format!("S {shape:?} vs graph of {n}")));
    }
    if n < 2 {
        return Err(Error::DegenerateBatch("pseudo-graph loss needs at least two samples".into()));
    }
    let (pos, neg) = off_diagonal_masks(w);
    let pos = g.constant(pos);
    let neg = g.constant(neg);
    let sc = g.clamp(s, LOG_CLAMP, 1.0 - LOG_CLAMP)?;
    let log_s = g.log(sc)?;
    let flipped = g.scale(sc, -1.0)?;
    let one_minus = g.shift(flipped, 1.0)?;
    let log_1ms = g.log(one_minus)?;
    let a = g.mul(pos, log_s)?;
    let b = g.mul(neg, log_1ms)?;
    let ab = g.add(a, b)?;
    let total = g.sum(ab)?;
    g.scale(total, -1.0 / (n * (n - 1)) as f64)
}

/// Cross-entropy of `z` against confident pseudo-labels, normalized by the
/// number of selected samples (at least one).
pub fn pseudo_label_loss(g: &mut Graph, z: Var, labels: &PseudoLabels) -> Result<Var> {
    let shape = g.value(z)?.shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::dim(
            "pseudo_label_loss",
            format!("z {shape:?} vs {} labels", labels.len()),
        ));
    }
    let picked = g.gather_cols(z, labels.labels.clone())?;
    let clamped = g.clamp(picked, LOG_CLAMP, 1.0)?;
    let logp = g.log(clamped)?;
    let mask = Tensor::vector(labels.selected.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect());
    let mask = g.constant(mask);
    let masked = g.mul(mask, logp)?;
    let total = g.sum(masked)?;
    let count = labels.num_selected().max(1) as f64;
    g.scale(total, -1.0 / count)
}

/// `l_pg + alpha * l_pl`.
pub fn combined_sample_loss(l_pg: f64, l_pl: f64, alpha: f64) -> f64 {
    l_pg + alpha * l_pl
}

/// How positive and negative partners are chosen for each anchor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingStrategy {
    /// Most similar positive, uniformly random negative.
    #[default]
    NearestPosRandomNeg,
    /// Most similar positive, least similar negative.
    NearestPosFarthestNeg,
    RandomPosRandomNeg,
    /// The globally most similar positive pairs, random negatives.
    TopnPosRandomNeg,
}

/// `(deep index, shallow index)` pairs for the mutual-information loss.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripletBatch {
    /// Pairs treated as drawn from the joint distribution (`W_ij = 1`).
    pub joint: Vec<(usize, usize)>,
    /// Pairs treated as drawn from the product of marginals (`W_ij = 0`).
    pub marginal: Vec<(usize, usize)>,
    /// Anchors dropped because no negative was available.
    pub skipped: Vec<usize>,
}

fn nearest_positive(w: &PseudoGraph, s: &SimilarityMatrix, i: usize) -> usize {
    (0..w.size())
        .filter(|&j| j != i && w.edge(i, j))
        .fold(None, |best: Option<usize>, j| match best {
            Some(b) if s.get(i, b) >= s.get(i, j) => Some(b),
            _ => Some(j),
        })
        .unwrap_or(i)
}

fn farthest_negative(w: &PseudoGraph, s: &SimilarityMatrix, i: usize) -> Option<usize> {
    (0..w.size())
        .filter(|&j| !w.edge(i, j))
        .fold(None, |best: Option<usize>, j| match best {
            Some(b) if s.get(i, b) <= s.get(i, j) => Some(b),
            _ => Some(j),
        })
}

/// Selects `n` joint and `n` marginal pairs from the pseudo-graph.
///
/// An anchor without a cross-sample positive pairs with itself. Anchors
/// without any negative are skipped (and reported in `skipped`).
pub fn sample_triplet_pairs(
    w: &PseudoGraph,
    s: &SimilarityMatrix,
    strategy: SamplingStrategy,
    n: usize,
    seed: u64,
) -> Result<TripletBatch> {
    let b = w.size();
    if s.size() != b {
        return Err(Error::LengthMismatch { left: s.size(), right: b });
    }
    if n == 0 || n > b {
        return Err(Error::Contract(format!("pair count {n} outside [1, {b}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let negatives = |i: usize| -> Vec<usize> { (0..b).filter(|&j| !w.edge(i, j)).collect() };

    // (anchor, positive) candidates in order of use
    let anchored: Vec<(usize, usize)> = match strategy {
        SamplingStrategy::TopnPosRandomNeg => {
            let mut cands: Vec<(usize, usize)> = (0..b)
                .flat_map(|i| (0..b).map(move |j| (i, j)))
                .filter(|&(i, j)| i != j && w.edge(i, j))
                .collect();
            cands.sort_by(|&(a, c), &(d, e)| s.get(d, e).total_cmp(&s.get(a, c)).then((a, c).cmp(&(d, e))));
            cands.truncate(n);
            let mut order: Vec<usize> = (0..b).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let fill = order.into_iter().map(|i| (i, i));
            cands.into_iter().chain(fill).take(n).collect()
        }
        _ => {
            let mut order: Vec<usize> = (0..b).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            order.truncate(n);
            order.sort_unstable();
            order
                .into_iter()
                .map(|i| {
                    let pos = match strategy {
                        SamplingStrategy::RandomPosRandomNeg => {
                            let p: Vec<usize> = (0..b).filter(|&j| j != i && w.edge(i, j)).collect();
                            p.choose(&mut rng).copied().unwrap_or(i)
                        }
                        _ => nearest_positive(w, s, i),
                    };
                    (i, pos)
                })
                .collect()
        }
    };

    let mut out = TripletBatch::default();
    for (i, pos) in anchored {
        let neg = match strategy {
            SamplingStrategy::NearestPosFarthestNeg => farthest_negative(w, s, i),
            _ => negatives(i).choose(&mut rng).copied(),
        };
        match neg {
            Some(j) => {
                out.joint.push((i, pos));
                out.marginal.push((i, j));
            }
            None => {
                debug!("anchor {i} has no negative partner; skipped");
                out.skipped.push(i);
            }
        }
    }
    if out.joint.is_empty() {
        return Err(Error::DegenerateBatch(format!(
            "no anchor among {b} samples has a negative partner"
        )));
    }
    Ok(out)
}

/// Negative Jensen-Shannon mutual-information estimate over sampled pairs:
/// `E_joint[sp(-T)] + E_marginal[sp(T)]`.
pub fn triplet_mi_loss(
    g: &mut Graph,
    disc: &DiscriminatorState,
    d: Var,
    s: Var,
    pairs: &TripletBatch,
) -> Result<Var> {
    if pairs.joint.is_empty() || pairs.marginal.is_empty() {
        return Err(Error::DegenerateBatch("mutual-information loss needs joint and marginal pairs".into()));
    }
    let score = |g: &mut Graph, set: &[(usize, usize)]| -> Result<Var> {
        let di = g.select_rows(d, set.iter().map(|p| p.0).collect())?;
        let si = g.select_rows(s, set.iter().map(|p| p.1).collect())?;
        disc.score(g, di, si)
    };
    let tj = score(g, &pairs.joint)?;
    let neg_tj = g.scale(tj, -1.0)?;
    let sp_j = g.softplus(neg_tj)?;
    let joint = g.mean(sp_j)?;
    let tm = score(g, &pairs.marginal)?;
    let sp_m = g.softplus(tm)?;
    let marginal = g.mean(sp_m)?;
    g.add(joint, marginal)
}

/// Scalar values of every loss term of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pg: f64,
    pub l_pg_prime: f64,
    pub l_pl: f64,
    pub l_pl_prime: f64,
    pub l_mi: f64,
    /// Optional prediction-invariance term; weighted by `gamma`.
    pub l_fi: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// `(l_pg + l_pg') + alpha (l_pl + l_pl') + beta l_mi (+ gamma l_fi)`.
pub fn total_loss(parts: &LossBreakdown) -> Result<f64> {
    let named = [
        ("l_pg", parts.l_pg),
        ("l_pg_prime", parts.l_pg_prime),
        ("l_pl", parts.l_pl),
        ("l_pl_prime", parts.l_pl_prime),
        ("l_mi", parts.l_mi),
        ("l_fi", parts.l_fi),
    ];
    if let Some((name, v)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Divergence { component: name.to_string(), value: *v });
    }
    Ok((parts.l_pg + parts.l_pg_prime)
        + parts.alpha * (parts.l_pl + parts.l_pl_prime)
        + parts.beta * parts.l_mi
        + parts.gamma * parts.l_fi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn sim(rows: &[Vec<f64>]) -> SimilarityMatrix {
        SimilarityMatrix::of(&Tensor::from_rows(rows).unwrap()).unwrap()
    }

    fn loss_value(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let l = f(&mut g).unwrap();
        g.value(l).unwrap().item().unwrap()
    }

    #[test]
    fn cosine_examples() {
        let s = sim(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((s.get(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(s.get(0, 2), 0.0);
        let s = sim(&[vec![0.9, 0.1], vec![0.8, 0.2]]);
        // 0.74 / sqrt(0.82 * 0.68)
        assert!((s.get(0, 1) - 0.990_992_430_410_323_4).abs() < 1e-12, "{}", s.get(0, 1));
    }

    #[test]
    fn cosine_rejects_zero_rows() {
        let z = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(SimilarityMatrix::of(&z), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn graph_thresholding() {
        let s = sim(&[vec![0.9, 0.1], vec![0.8, 0.2], vec![0.0, 1.0]]);
        let w = build_pseudo_graph(&s, 0.95).unwrap();
        assert!(w.edge(0, 1) && w.edge(1, 0));
        assert!(!w.edge(0, 2));
        assert!((0..3).all(|i| w.edge(i, i)));
        assert!(build_pseudo_graph(&s, 1.0).is_err());
        assert!(build_pseudo_graph(&s, 0.0).is_err());
    }

    #[test]
    fn pseudo_label_examples() {
        let z = Tensor::from_rows(&[vec![0.2, 0.7, 0.1], vec![0.95, 0.03, 0.02]]).unwrap();
        let l = assign_pseudo_labels(&z, 0.9).unwrap();
        assert_eq!(l.labels, vec![1, 0]);
        assert_eq!(l.confidence, vec![0.7, 0.95]);
        assert_eq!(l.selected, vec![false, true]);
        let tie = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let l = assign_pseudo_labels(&tie, 0.5).unwrap();
        assert_eq!((l.labels[0], l.confidence[0], l.selected[0]), (0, 0.5, true));
    }

    fn two_by_two(off: f64) -> Tensor {
        Tensor::from_rows(&[vec![1.0, off], vec![off, 1.0]]).unwrap()
    }

    #[test]
    fn graph_loss_half_similarity_is_ln2() {
        for edge in [true, false] {
            let w = PseudoGraph::from_edges(2, vec![true, edge, edge, true], 0.95).unwrap();
            let v = loss_value(|g| {
                let s = g.constant(two_by_two(0.5));
                pseudo_graph_loss(g, s, &w)
            });
            assert!((v - LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_loss_vanishes_on_perfect_graph() {
        let w = PseudoGraph::from_edges(
            3,
            vec![true, true, false, true, true, false, false, false, true],
            0.95,
        )
        .unwrap();
        let s = Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let v = loss_value(|g| {
            let s = g.constant(s);
            pseudo_graph_loss(g, s, &w)
        });
        assert!(v < 2e-7, "{v}");
    }

    #[test]
    fn label_loss_examples() {
        let labels = |sel: bool| PseudoLabels {
            labels: vec![0],
            confidence: vec![1.0],
            selected: vec![sel],
            thres2: 0.9,
        };
        let ce = |row: Vec<f64>, sel: bool| {
            loss_value(|g| {
                let z = g.constant(Tensor::from_rows(&[row]).unwrap());
                pseudo_label_loss(g, z, &labels(sel))
            })
        };
        assert!(ce(vec![1.0, 0.0], true).abs() < 1e-12);
        assert!((ce(vec![0.5, 0.5], true) - LN_2).abs() < 1e-12);
        assert_eq!(ce(vec![0.5, 0.5], false), 0.0);
    }

    #[test]
    fn combined_examples() {
        assert_eq!(combined_sample_loss(1.0, 0.0, 5.0), 1.0);
        assert_eq!(combined_sample_loss(0.0, 1.0, 5.0), 5.0);
        assert!((combined_sample_loss(0.7, 0.2, 5.0) - 1.7).abs() < 1e-12);
    }

    fn identity_graph(n: usize) -> PseudoGraph {
        let edges = (0..n * n).map(|k| k / n == k % n).collect();
        PseudoGraph::from_edges(n, edges, 0.95).unwrap()
    }

    fn flat_sim(n: usize) -> SimilarityMatrix {
        SimilarityMatrix::from_tensor(&Tensor::full(&[n, n], 0.5)).unwrap()
    }

    #[test]
    fn identity_graph_gives_self_pairs() {
        let p = sample_triplet_pairs(&identity_graph(4), &flat_sim(4), SamplingStrategy::default(), 4, 1).unwrap();
        assert_eq!(p.joint, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert_eq!(p.marginal.len(), 4);
        assert!(p.marginal.iter().all(|&(i, j)| i != j));
    }

    #[test]
    fn complete_graph_is_degenerate() {
        let w = PseudoGraph::from_edges(4, vec![true; 16], 0.95).unwrap();
        for strat in [
            SamplingStrategy::NearestPosRandomNeg,
            SamplingStrategy::NearestPosFarthestNeg,
            SamplingStrategy::RandomPosRandomNeg,
            SamplingStrategy::TopnPosRandomNeg,
        ] {
            let r = sample_triplet_pairs(&w, &flat_sim(4), strat, 4, 0);
            assert!(matches!(r, Err(Error::DegenerateBatch(_))));
        }
    }

    #[test]
    fn nearest_and_farthest() {
        // two groups {0, 1, 2} and {3}; 0's nearest positive is 2
        let s = SimilarityMatrix::from_tensor(
            &Tensor::from_rows(&[
                vec![1.0, 0.96, 0.99, 0.1],
                vec![0.96, 1.0, 0.97, 0.2],
                vec![0.99, 0.97, 1.0, 0.3],
                vec![0.1, 0.2, 0.3, 1.0],
            ])
            .unwrap(),
        )
        .unwrap();
        let w = build_pseudo_graph(&s, 0.95).unwrap();
        let p = sample_triplet_pairs(&w, &s, SamplingStrategy::NearestPosFarthestNeg, 4, 3).unwrap();
        assert_eq!(p.joint, vec![(0, 2), (1, 2), (2, 0), (3, 3)]);
        assert_eq!(p.marginal, vec![(0, 3), (1, 3), (2, 3), (3, 0)]);
        let top = sample_triplet_pairs(&w, &s, SamplingStrategy::TopnPosRandomNeg, 2, 3).unwrap();
        assert_eq!(top.joint, vec![(0, 2), (2, 0)]);
    }

    #[test]
    fn mi_loss_at_zero_discriminator() {
        let mut disc = DiscriminatorState::init(2, 3, 4, 0).unwrap();
        disc.zero_output_layer();
        let pairs = TripletBatch { joint: vec![(0, 0), (1, 1)], marginal: vec![(0, 1), (1, 0)], skipped: vec![] };
        let v = loss_value(|g| {
            let d = g.constant(Tensor::full(&[2, 2], 0.3));
            let s = g.constant(Tensor::full(&[2, 3], -0.2));
            triplet_mi_loss(g, &disc, d, s, &pairs)
        });
        assert!((v - 2.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn mi_loss_needs_both_sides() {
        let disc = DiscriminatorState::init(2, 3, 4, 0).unwrap();
        let pairs = TripletBatch { joint: vec![(0, 0)], marginal: vec![], skipped: vec![] };
        let mut g = Graph::new();
        let d = g.constant(Tensor::full(&[2, 2], 0.3));
        let s = g.constant(Tensor::full(&[2, 3], -0.2));
        assert!(matches!(triplet_mi_loss(&mut g, &disc, d, s, &pairs), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn total_loss_examples() {
        let mut p = LossBreakdown { alpha: 5.0, beta: 0.1, ..Default::default() };
        assert_eq!(total_loss(&p).unwrap(), 0.0);
        p.l_pg = 1.0;
        p.l_pg_prime = 1.0;
        p.l_pl = 1.0;
        p.l_pl_prime = 1.0;
        p.l_mi = 1.0;
        assert!((total_loss(&p).unwrap() - 12.1).abs() < 1e-12);
        p.beta = 0.0;
        assert_eq!(
            total_loss(&p).unwrap(),
            combined_sample_loss(1.0, 1.0, 5.0) + combined_sample_loss(1.0, 1.0, 5.0)
        );
        p.l_mi = f64::NAN;
        match total_loss(&p) {
            Err(Error::Divergence { component, .. }) => assert_eq!(component, "l_mi"),
            other => panic!("{other:?}"),
        }
    }
}
