//! Brute-force reference implementations shared by the integration tests.
//! None of these call into the library's metric or sweep code.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random label vector with `n` items over at most `k` labels.
pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// 50 random partition pairs with N <= 30 and at most 6 clusters each.
pub fn partition_pairs(seed: u64) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..50)
        .map(|_| {
            let n = rng.random_range(1..=30);
            let ka = rng.random_range(1..=6);
            let kb = rng.random_range(1..=6);
            (random_labels(&mut rng, n, ka), random_labels(&mut rng, n, kb))
        })
        .collect()
}

fn entropy(labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    counts.values().map(|&c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

/// I(A;B) / sqrt(H(A) H(B)) straight from the probability definitions.
pub fn nmi_oracle(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut joint = BTreeMap::new();
    let mut pa = BTreeMap::new();
    let mut pb = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0.0) += 1.0 / n;
        *pa.entry(x).or_insert(0.0) += 1.0 / n;
        *pb.entry(y).or_insert(0.0) += 1.0 / n;
    }
    let mi: f64 = joint.iter().map(|(&(x, y), &p)| p * (p / (pa[&x] * pb[&y])).ln()).sum();
    let (ha, hb) = (entropy(a), entropy(b));
    if ha == 0.0 || hb == 0.0 {
        return if ha == hb { 1.0 } else { 0.0 };
    }
    mi / (ha * hb).sqrt()
}

/// Adjusted Rand index from explicit pair enumeration.
pub fn ari_oracle(a: &[usize], b: &[usize]) -> f64 {
    let (mut both, mut only_a, mut only_b, mut neither) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => both += 1.0,
                (true, false) => only_a += 1.0,
                (false, true) => only_b += 1.0,
                (false, false) => neither += 1.0,
            }
        }
    }
    let den = (both + only_a) * (only_a + neither) + (both + only_b) * (only_b + neither);
    if den == 0.0 {
        return 1.0;
    }
    2.0 * (both * neither - only_a * only_b) / den
}

fn permutations(m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(m - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, m - 1);
            out.push(q);
        }
    }
    out
}

/// Best accuracy over every one-to-one map from predicted to true labels.
pub fn acc_oracle(pred: &[usize], truth: &[usize]) -> f64 {
    let ids = |l: &[usize]| l.iter().copied().collect::<BTreeSet<_>>().into_iter().collect::<Vec<_>>();
    let (pa, ta) = (ids(pred), ids(truth));
    let m = pa.len().max(ta.len());
    let mut best = 0usize;
    for perm in permutations(m) {
        let hits = pred
            .iter()
            .zip(truth)
            .filter(|(&p, &t)| {
                let i = pa.iter().position(|&x| x == p).unwrap();
                perm[i] < ta.len() && ta[perm[i]] == t
            })
            .count();
        best = best.max(hits);
    }
    best as f64 / pred.len() as f64
}

/// BCubed precision and recall from per-item cluster and class sets.
pub fn bcubed_oracle(pred: &[usize], truth: &[usize]) -> (f64, f64) {
    let n = pred.len();
    let mut p = 0.0;
    let mut r = 0.0;
    for i in 0..n {
        let cluster: Vec<usize> = (0..n).filter(|&j| pred[j] == pred[i]).collect();
        let class: Vec<usize> = (0..n).filter(|&j| truth[j] == truth[i]).collect();
        let common = cluster.iter().filter(|j| class.contains(j)).count() as f64;
        p += common / cluster.len() as f64;
        r += common / class.len() as f64;
    }
    (p / n as f64, r / n as f64)
}

/// Symmetric weight matrix with distinct off-diagonal entries.
pub fn random_complete_graph(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let mut w = vec![vec![0.0; n]; n];
    let mut ranks: Vec<usize> = (0..n * (n.saturating_sub(1)) / 2).collect();
    for i in (1..ranks.len()).rev() {
        ranks.swap(i, rng.random_range(0..=i));
    }
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            // distinct by construction, jittered so gaps are uneven
            let v = ranks[k] as f64 + rng.random_range(0.0..0.9);
            w[i][j] = v;
            w[j][i] = v;
            k += 1;
        }
    }
    w
}

/// Components of `{(i, j) : w_ij > t}` by breadth-first search, labelled in
/// order of first appearance.
pub fn components_above(w: &[Vec<f64>], t: f64) -> Vec<usize> {
    let n = w.len();
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        label[s] = next;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                if v != u && label[v] == usize::MAX && w[u][v] > t {
                    label[v] = next;
                    queue.push_back(v);
                }
            }
        }
        next += 1;
    }
    label
}

/// Lowest threshold (among `-inf` and the edge weights) whose graph has
/// exactly `k` components, with that partition.
pub fn k_partition_oracle(w: &[Vec<f64>], k: usize) -> Option<(f64, Vec<usize>)> {
    let n = w.len();
    let mut candidates = vec![f64::NEG_INFINITY];
    for i in 0..n {
        for j in i + 1..n {
            candidates.push(w[i][j]);
        }
    }
    candidates.sort_by(f64::total_cmp);
    candidates.into_iter().find_map(|t| {
        let lab = components_above(w, t);
        let count = lab.iter().copied().max().map_or(0, |m| m + 1);
        (count == k).then_some((t, lab))
    })
}

/// Relabels densely in order of first appearance.
pub fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}
