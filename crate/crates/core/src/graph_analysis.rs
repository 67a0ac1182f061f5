//! Threshold sweeps over weighted complete graphs, and training diagnostics
//! derived from the prediction matrix.
//!
//! The sweep keeps edges with weight strictly above the threshold
//! (`w > t`), whereas [`crate::correlation::build_pseudo_graph`] keeps
//! `S_ij >= thres1`.

use log::warn;

use crate::correlation::{argmax_rows, build_pseudo_graph, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::metrics::{bcubed_relation, Partition};
use crate::tensor::Tensor;

/// Disjoint-set forest with path halving and union by size.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
    sets: usize,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), size: vec![1; n], sets: n }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns `true` if two sets were merged.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        self.sets -= 1;
        true
    }

    pub fn num_sets(&self) -> usize {
        self.sets
    }

    /// Dense component ids in order of first appearance.
    pub fn labels(&mut self) -> Vec<usize> {
        let roots: Vec<usize> = (0..self.parent.len()).map(|i| self.find(i)).collect();
        Partition::from_labels(&roots).assignment().to_vec()
    }
}

/// One interval of thresholds `lo <= t < hi` sharing the same edge set.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepLevel {
    /// `-inf` for the level that keeps every edge.
    pub lo: f64,
    /// `+inf` for the level that keeps no edge.
    pub hi: f64,
    pub components: usize,
    pub assignment: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSweep {
    /// Distinct off-diagonal weights, ascending (after any tie perturbation).
    pub weights: Vec<f64>,
    /// Levels in order of increasing threshold.
    pub levels: Vec<SweepLevel>,
    /// Whether tied weights had to be perturbed.
    pub perturbed: bool,
}

/// Connected components of `{edges with weight > t}` for every distinct `t`.
///
/// Reads the upper triangle of a symmetric `N x N` weight matrix. Tied
/// weights are separated by adding `1e-12 * edge_index`.
pub fn threshold_partition_sweep(weights: &Tensor) -> Result<ThresholdSweep> {
    if weights.rank() != 2 || weights.shape()[0] != weights.shape()[1] {
        return Err(Error::dim("threshold_sweep", format!("not square: {:?}", weights.shape())));
    }
    let n = weights.shape()[0];
    if n < 1 {
        return Err(Error::Contract("sweep over an empty graph".into()));
    }
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            edges.push((weights.data()[i * n + j], i, j));
        }
    }
    let mut sorted: Vec<f64> = edges.iter().map(|e| e.0).collect();
    sorted.sort_by(f64::total_cmp);
    let perturbed = sorted.windows(2).any(|w| w[0] == w[1]);
    if perturbed {
        warn!("tied edge weights; perturbing by 1e-12 per edge index");
        for (k, e) in edges.iter_mut().enumerate() {
            e.0 += 1e-12 * k as f64;
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));
    let ws: Vec<f64> = edges.iter().map(|e| e.0).collect();

    // add edges from heaviest down; after adding edge k the kept set is
    // {w >= ws[k]}, i.e. thresholds in [ws[k-1], ws[k])
    let m = edges.len();
    let mut uf = UnionFind::new(n);
    let mut levels = Vec::with_capacity(m + 1);
    levels.push(SweepLevel {
        lo: ws.last().copied().unwrap_or(f64::NEG_INFINITY),
        hi: f64::INFINITY,
        components: n,
        assignment: uf.labels(),
    });
    for k in (0..m).rev() {
        let (_, a, b) = edges[k];
        uf.union(a, b);
        levels.push(SweepLevel {
            lo: if k == 0 { f64::NEG_INFINITY } else { ws[k - 1] },
            hi: ws[k],
            components: uf.num_sets(),
            assignment: uf.labels(),
        });
    }
    levels.reverse();
    Ok(ThresholdSweep { weights: ws, levels, perturbed })
}

/// Smallest threshold interval whose graph has exactly `k` components.
pub fn find_k_partition_threshold(sweep: &ThresholdSweep, k: usize) -> Result<Option<SweepLevel>> {
    let n = sweep.levels.last().map_or(0, |l| l.assignment.len());
    if k < 1 || k > n {
        return Err(Error::Contract(format!("K = {k} outside [1, {n}]")));
    }
    let found = sweep.levels.iter().find(|l| l.components == k).cloned();
    if found.is_none() {
        warn!("no threshold yields exactly {k} components");
    }
    Ok(found)
}

/// A row counts as one-hot when its largest entry is at least `1 - tol`.
pub fn verify_one_hot(z: &Tensor, tol: f64) -> (f64, Vec<bool>) {
    let flags: Vec<bool> = argmax_rows(z).into_iter().map(|(_, p)| p >= 1.0 - tol).collect();
    let frac = if flags.is_empty() {
        0.0
    } else {
        flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
    };
    (frac, flags)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct BCubedPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// BCubed precision/recall of the thresholded similarity graph at each
/// threshold, using the graph's edges as the predicted relation.
pub fn bcubed_curve(s: &SimilarityMatrix, truth: &Partition, thresholds: &[f64]) -> Result<Vec<BCubedPoint>> {
    if thresholds.is_empty() {
        return Err(Error::Contract("empty threshold list".into()));
    }
    thresholds
        .iter()
        .map(|&t| {
            let w = build_pseudo_graph(s, t)?;
            let (precision, recall) = bcubed_relation(s.size(), |i, j| w.edge(i, j), truth)?;
            Ok(BCubedPoint { threshold: t, precision, recall })
        })
        .collect()
}

/// Renders a curve as `threshold,precision,recall` CSV with a header.
pub fn bcubed_csv(points: &[BCubedPoint]) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
    }
    out
}

/// Counts of max-probabilities over bins of width 0.1 on `[1/K, 1]`.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ConcentrationHistogram {
    /// Bin boundaries; bin `b` is `[edges[b], edges[b + 1])`, the last one closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl ConcentrationHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub fn concentration_histogram(z: &Tensor) -> ConcentrationHistogram {
    let k = z.row_len().max(1);
    let start = 1.0 / k as f64;
    let mut edges = vec![start];
    edges.extend((1..10).map(|m| m as f64 / 10.0).filter(|&e| e > start + 1e-12));
    edges.push(1.0);
    let bins = edges.len() - 1;
    let mut counts = vec![0; bins];
    for (_, p) in argmax_rows(z) {
        let b = edges[1..bins].iter().take_while(|&&e| p >= e).count();
        counts[b] += 1;
    }
    ConcentrationHistogram { edges, counts }
}
