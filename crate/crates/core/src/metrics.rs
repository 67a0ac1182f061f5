//! External clustering metrics: NMI, ARI, Hungarian-matched accuracy and
//! BCubed precision/recall.

use crate::error::{Error, Result};

/// Hard assignment of `N` items to clusters `0..num_clusters`, every cluster
/// non-empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    assignment: Vec<usize>,
    num_clusters: usize,
}

impl Partition {
    pub fn new(assignment: Vec<usize>, num_clusters: usize) -> Result<Self> {
        let mut seen = vec![false; num_clusters];
        for &c in &assignment {
            if c >= num_clusters {
                return Err(Error::Contract(format!("cluster id {c} >= {num_clusters}")));
            }
            seen[c] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Contract(format!("cluster {c} is empty")));
        }
        Ok(Partition { assignment, num_clusters })
    }

    /// Relabels arbitrary ids densely in order of first appearance.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let assignment = labels
            .iter()
            .map(|&l| {
                let next = map.len();
                *map.entry(l).or_insert(next)
            })
            .collect();
        Partition { assignment, num_clusters: map.len() }
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cluster_of(&self, i: usize) -> usize {
        self.assignment[i]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.num_clusters];
        for &c in &self.assignment {
            s[c] += 1;
        }
        s
    }
}

/// Co-occurrence counts between two partitions of the same items.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<usize>>,
    pub row_sums: Vec<usize>,
    pub col_sums: Vec<usize>,
    pub total: usize,
}

impl ContingencyTable {
    pub fn new(a: &Partition, b: &Partition) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
        }
        let mut counts = vec![vec![0; b.num_clusters()]; a.num_clusters()];
        for (&i, &j) in a.assignment().iter().zip(b.assignment()) {
            counts[i][j] += 1;
        }
        Ok(ContingencyTable { counts, row_sums: a.sizes(), col_sums: b.sizes(), total: a.len() })
    }
}

fn xlogx_ratio(c: f64, num: f64, den: f64) -> f64 {
    if c == 0.0 {
        0.0
    } else {
        c * (num / den).ln()
    }
}

/// Normalized mutual information with the geometric-mean normalizer.
///
/// When either partition has zero entropy the ratio is undefined; it is 1
/// for identical partitions and 0 otherwise.
pub fn nmi(pred: &Partition, truth: &Partition) -> Result<f64> {
    let t = ContingencyTable::new(pred, truth)?;
    if t.total == 0 {
        return Err(Error::Contract("nmi of empty partitions".into()));
    }
    let n = t.total as f64;
    let mut mi = 0.0;
    for (i, row) in t.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            let c = c as f64;
            mi += xlogx_ratio(c, n * c, t.row_sums[i] as f64 * t.col_sums[j] as f64);
        }
    }
    let ha: f64 = t.row_sums.iter().map(|&a| xlogx_ratio(a as f64, a as f64, n)).sum();
    let hb: f64 = t.col_sums.iter().map(|&b| xlogx_ratio(b as f64, b as f64, n)).sum();
    if ha == 0.0 || hb == 0.0 {
        return Ok(if ha == hb { 1.0 } else { 0.0 });
    }
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

fn choose2(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index; 1 when the denominator vanishes.
pub fn ari(pred: &Partition, truth: &Partition) -> Result<f64> {
    let t = ContingencyTable::new(pred, truth)?;
    let index: f64 = t.counts.iter().flatten().map(|&c| choose2(c)).sum();
    let sa: f64 = t.row_sums.iter().map(|&a| choose2(a)).sum();
    let sb: f64 = t.col_sums.iter().map(|&b| choose2(b)).sum();
    let pairs = choose2(t.total);
    let expected = if pairs > 0.0 { sa * sb / pairs } else { 0.0 };
    let max = 0.5 * (sa + sb);
    let den = max - expected;
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / den)
}

/// Solves the square assignment problem, minimizing total cost.
/// Returns `assign[row] = col`.
pub fn hungarian_min(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    const INF: i64 = i64::MAX / 4;
    // 1-based potentials over rows (u) and columns (v); p[col] = matched row
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Best one-to-one cluster-to-class mapping accuracy. Returns the accuracy and
/// the mapping `pred cluster -> truth class` (classes beyond the truth's
/// range mean "unmatched").
pub fn hungarian_mapping(pred: &Partition, truth: &Partition) -> Result<(f64, Vec<usize>)> {
    let t = ContingencyTable::new(pred, truth)?;
    if t.total == 0 {
        return Err(Error::Contract("accuracy of empty partitions".into()));
    }
    let size = pred.num_clusters().max(truth.num_clusters());
    if size > 64 {
        return Err(Error::Contract(format!("{size} clusters exceeds the supported 64")));
    }
    let mut cost = vec![vec![0i64; size]; size];
    for (i, row) in t.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            cost[i][j] = -(c as i64);
        }
    }
    let assign = hungarian_min(&cost);
    let matched: usize = (0..pred.num_clusters())
        .map(|i| t.counts[i].get(assign[i]).copied().unwrap_or(0))
        .sum();
    Ok((matched as f64 / t.total as f64, assign[..pred.num_clusters()].to_vec()))
}

pub fn hungarian_acc(pred: &Partition, truth: &Partition) -> Result<f64> {
    Ok(hungarian_mapping(pred, truth)?.0)
}

/// BCubed precision and recall of a reflexive relation against a partition.
///
/// `related(i, j)` must be true for `i == j`.
pub fn bcubed_relation(n: usize, related: impl Fn(usize, usize) -> bool, truth: &Partition) -> Result<(f64, f64)> {
    if truth.len() != n {
        return Err(Error::LengthMismatch { left: n, right: truth.len() });
    }
    if n == 0 {
        return Err(Error::Contract("bcubed of zero items".into()));
    }
    let sizes = truth.sizes();
    let mut precision = 0.0;
    let mut recall = 0.0;
    for i in 0..n {
        if !related(i, i) {
            return Err(Error::Contract(format!("item {i} is not related to itself")));
        }
        let mut linked = 0usize;
        let mut correct = 0usize;
        for j in 0..n {
            if related(i, j) {
                linked += 1;
                if truth.cluster_of(i) == truth.cluster_of(j) {
                    correct += 1;
                }
            }
        }
        precision += correct as f64 / linked as f64;
        recall += correct as f64 / sizes[truth.cluster_of(i)] as f64;
    }
    Ok((precision / n as f64, recall / n as f64))
}

pub fn bcubed(pred: &Partition, truth: &Partition) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: truth.len() });
    }
    bcubed_relation(pred.len(), |i, j| pred.cluster_of(i) == pred.cluster_of(j), truth)
}

/// NMI, accuracy and ARI together.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClusteringScores {
    pub nmi: f64,
    pub acc: f64,
    pub ari: f64,
}

pub fn score_all(pred: &Partition, truth: &Partition) -> Result<ClusteringScores> {
    Ok(ClusteringScores { nmi: nmi(pred, truth)?, acc: hungarian_acc(pred, truth)?, ari: ari(pred, truth)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(l: &[usize]) -> Partition {
        Partition::from_labels(l)
    }

    #[test]
    fn partition_requires_nonempty_clusters() {
        assert!(Partition::new(vec![0, 2], 3).is_err());
        assert!(Partition::new(vec![0, 3], 3).is_err());
        assert_eq!(p(&[7, 7, 3]).assignment(), &[0, 0, 1]);
    }

    #[test]
    fn nmi_examples() {
        assert_eq!(nmi(&p(&[0, 0, 1, 1]), &p(&[1, 1, 0, 0])).unwrap(), 1.0);
        assert!(nmi(&p(&[0, 0, 1, 1]), &p(&[0, 1, 0, 1])).unwrap().abs() < 1e-12);
        assert_eq!(nmi(&p(&[0, 0, 0]), &p(&[1, 1, 1])).unwrap(), 1.0);
        assert_eq!(nmi(&p(&[0, 0, 0]), &p(&[0, 1, 1])).unwrap(), 0.0);
        // [0,0,1] vs [0,1,1]: MI = (2/3) ln 2 - ... evaluated by hand:
        // cells (0,0)=1,(0,1)=1,(1,1)=1; a=(2,1), b=(1,2)
        // MI_sum = ln(3/2) + ln(3/4) + ln(3/2)
        // H_sum = 2 ln(2/3) + ln(1/3)
        let mi = (1.5f64).ln() + (0.75f64).ln() + (1.5f64).ln();
        let h = 2.0 * (2.0f64 / 3.0).ln() + (1.0f64 / 3.0).ln();
        let expect = mi / h.abs();
        assert!((nmi(&p(&[0, 0, 1]), &p(&[0, 1, 1])).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(nmi(&p(&[0]), &p(&[0, 1])), Err(Error::LengthMismatch { .. })));
        assert!(ari(&p(&[0]), &p(&[0, 1])).is_err());
        assert!(hungarian_acc(&p(&[0]), &p(&[0, 1])).is_err());
    }

    #[test]
    fn ari_examples() {
        assert_eq!(ari(&p(&[0, 1, 2, 0]), &p(&[5, 6, 7, 5])).unwrap(), 1.0);
        assert_eq!(ari(&p(&[0, 0, 0]), &p(&[0, 0, 0])).unwrap(), 1.0);
        // [0,0,1,1] vs [0,0,0,1]: index=1, sa=2, sb=3, pairs=6
        // expected = 1, max = 2.5 -> 0 / 1.5
        assert!(ari(&p(&[0, 0, 1, 1]), &p(&[0, 0, 0, 1])).unwrap().abs() < 1e-12);
    }

    #[test]
    fn acc_examples() {
        assert_eq!(hungarian_acc(&p(&[1, 1, 0, 0]), &p(&[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(hungarian_acc(&p(&[0, 1, 0, 1]), &p(&[0, 0, 1, 1])).unwrap(), 0.5);
        // unequal cluster counts pad with zeros
        assert_eq!(hungarian_acc(&p(&[0, 0, 0, 0]), &p(&[0, 1, 2, 3])).unwrap(), 0.25);
        assert_eq!(hungarian_acc(&p(&[0, 1, 2, 3]), &p(&[0, 0, 1, 1])).unwrap(), 0.5);
    }

    #[test]
    fn bcubed_examples() {
        let truth = p(&[0, 0, 1, 1]);
        assert_eq!(bcubed(&truth, &truth).unwrap(), (1.0, 1.0));
        assert_eq!(bcubed(&p(&[0, 1, 2, 3]), &truth).unwrap(), (1.0, 0.5));
        assert_eq!(bcubed(&p(&[0, 0, 0, 0]), &truth).unwrap(), (0.5, 1.0));
        assert!(bcubed_relation(4, |i, j| i != j, &truth).is_err());
    }

    #[test]
    fn hungarian_solves_classic_instance() {
        let cost = vec![vec![4, 1, 3], vec![2, 0, 5], vec![3, 2, 2]];
        let a = hungarian_min(&cost);
        let total: i64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        assert_eq!(total, 5);
    }
}
