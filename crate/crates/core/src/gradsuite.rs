//! Finite-difference checks of every primitive and every loss.
//!
//! Primitives are checked through a weighted sum of their output so each
//! output entry contributes. Losses are checked with their supervision
//! (pseudo-graph, labels, pairs) computed once from the unperturbed point,
//! since training treats those as constants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient_check_store, Graph, Padding, ParamStore, Var};
use crate::correlation::{
    assign_pseudo_labels, build_pseudo_graph, cosine_similarity, pseudo_graph_loss, pseudo_label_loss,
    sample_triplet_pairs, triplet_mi_loss, PseudoGraph, PseudoLabels, SamplingStrategy, SimilarityMatrix,
    TripletBatch,
};
use crate::error::Result;
use crate::model::{DiscriminatorState, EncoderConfig, EncoderState, LayerSpec};
use crate::robustness::{apply_transform, robustness_losses, TransformSpec};
use crate::tensor::Tensor;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const LOSS_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    Primitive,
    Loss,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub kind: CheckKind,
    /// Worst relative error over all seeds.
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values with magnitude in `[0.1, 1)` and random sign, away from kinks at 0.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Values in `[-1, 1]` at least 0.05 away from the clamp bounds `±0.5`.
fn off_bounds(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0).map(|v| if (v.abs() - 0.5).abs() < 0.05 { v * 0.8 } else { v })
}

/// `sum(y * r)` for a fixed pseudo-random `r`.
fn weighted_sum(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.value(y)?.shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0xfeed);
    let r = g.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(y, r)?;
    g.sum(p)
}

type Op = fn(&mut Graph, &[Var]) -> Result<Var>;
type Gen = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

fn primitive_cases() -> Vec<(&'static str, Gen, Op)> {
    vec![
        ("add", |r| vec![signed(r, &[3, 4]), signed(r, &[3, 4])], |g, v| g.add(v[0], v[1])),
        ("sub", |r| vec![signed(r, &[3, 4]), signed(r, &[3, 4])], |g, v| g.sub(v[0], v[1])),
        ("mul", |r| vec![signed(r, &[3, 4]), signed(r, &[3, 4])], |g, v| g.mul(v[0], v[1])),
        ("div", |r| vec![signed(r, &[3, 4]), uniform(r, &[3, 4], 0.5, 2.0)], |g, v| g.div(v[0], v[1])),
        ("add_row_bias", |r| vec![signed(r, &[3, 4]), signed(r, &[4])], |g, v| g.add_row_bias(v[0], v[1])),
        (
            "channel_affine",
            |r| vec![signed(r, &[2, 3, 4, 4]), signed(r, &[3]), signed(r, &[3])],
            |g, v| g.channel_affine(v[0], v[1], v[2]),
        ),
        ("matmul", |r| vec![signed(r, &[3, 4]), signed(r, &[4, 5])], |g, v| g.matmul(v[0], v[1])),
        ("transpose", |r| vec![signed(r, &[3, 4])], |g, v| g.transpose(v[0])),
        ("reshape", |r| vec![signed(r, &[3, 4])], |g, v| g.reshape(v[0], vec![2, 6])),
        (
            "conv2d_same",
            |r| vec![signed(r, &[2, 2, 5, 5]), signed(r, &[3, 2, 3, 3]), signed(r, &[3])],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), Padding::Same),
        ),
        (
            "conv2d_valid",
            |r| vec![signed(r, &[2, 2, 5, 5]), signed(r, &[3, 2, 3, 3])],
            |g, v| g.conv2d(v[0], v[1], None, Padding::Valid),
        ),
        ("maxpool2d", |r| vec![signed(r, &[2, 2, 4, 4])], |g, v| g.maxpool2d(v[0], 2)),
        ("avgpool2d", |r| vec![signed(r, &[2, 2, 4, 4])], |g, v| g.avgpool2d(v[0], 2)),
        ("relu", |r| vec![signed(r, &[4, 5])], |g, v| g.relu(v[0])),
        ("softmax", |r| vec![uniform(r, &[3, 5], -3.0, 3.0)], |g, v| g.softmax(v[0])),
        ("softplus", |r| vec![uniform(r, &[3, 5], -4.0, 4.0)], |g, v| g.softplus(v[0])),
        ("log", |r| vec![uniform(r, &[3, 4], 0.5, 2.0)], |g, v| g.log(v[0])),
        ("exp", |r| vec![signed(r, &[3, 4])], |g, v| g.exp(v[0])),
        ("sqrt", |r| vec![uniform(r, &[3, 4], 0.5, 2.0)], |g, v| g.sqrt(v[0])),
        ("sum", |r| vec![signed(r, &[3, 4])], |g, v| g.sum(v[0])),
        ("mean", |r| vec![signed(r, &[3, 4])], |g, v| g.mean(v[0])),
        ("concat", |r| vec![signed(r, &[3, 2]), signed(r, &[3, 4])], |g, v| g.concat(&[v[0], v[1]])),
        ("l2_norm_rows", |r| vec![signed(r, &[4, 3])], |g, v| g.l2_norm_rows(v[0])),
        ("scale", |r| vec![signed(r, &[3, 4])], |g, v| g.scale(v[0], -1.7)),
        ("shift", |r| vec![signed(r, &[3, 4])], |g, v| g.shift(v[0], 0.3)),
        ("clamp", |r| vec![off_bounds(r, &[4, 5])], |g, v| g.clamp(v[0], -0.5, 0.5)),
        ("select_rows", |r| vec![signed(r, &[5, 3])], |g, v| g.select_rows(v[0], vec![4, 0, 0, 2])),
        ("gather_cols", |r| vec![signed(r, &[4, 3])], |g, v| g.gather_cols(v[0], vec![2, 0, 1, 2])),
    ]
}

fn check_primitive(gen: Gen, op: Op, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (i, t) in gen(&mut rng).into_iter().enumerate() {
        store.push(format!("x{i}"), t);
    }
    let keys: Vec<_> = (0..store.len()).map(|i| store.key(i)).collect();
    gradient_check_store(
        &mut store,
        |g, s| {
            let vars: Vec<Var> = keys.iter().map(|&k| s.bind(g, k)).collect();
            let y = op(g, &vars)?;
            weighted_sum(g, y)
        },
        EPS,
    )
}

/// Predictions with a few near-duplicate rows, so the pseudo-graph has
/// both kinds of pairs and some labels are confident.
fn clustered_logits(rng: &mut ChaCha8Rng, b: usize, k: usize) -> Tensor {
    let centres: Vec<Vec<f64>> = (0..k).map(|c| (0..k).map(|j| if j == c { 4.0 } else { 0.0 }).collect()).collect();
    let rows: Vec<Vec<f64>> = (0..b)
        .map(|i| centres[i % k].iter().map(|&v| v + rng.random_range(-0.3..0.3)).collect())
        .collect();
    Tensor::from_rows(&rows).expect("rows")
}

fn supervision(z: &Tensor) -> Result<(PseudoGraph, PseudoLabels, SimilarityMatrix)> {
    let s = SimilarityMatrix::of(z)?;
    Ok((build_pseudo_graph(&s, 0.95)?, assign_pseudo_labels(z, 0.9)?, s))
}

fn softmax_of(t: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(t.clone());
    let z = g.softmax(x)?;
    Ok(g.value(z)?.clone())
}

fn check_pg(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = clustered_logits(&mut rng, 6, 3);
    let (w, _, _) = supervision(&softmax_of(&logits)?)?;
    let mut store = ParamStore::new();
    let k = store.push("logits", logits);
    gradient_check_store(
        &mut store,
        |g, s| {
            let l = s.bind(g, k);
            let z = g.softmax(l)?;
            let sim = cosine_similarity(g, z)?;
            pseudo_graph_loss(g, sim, &w)
        },
        EPS,
    )
}

fn check_pl(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = clustered_logits(&mut rng, 6, 3);
    let (_, labels, _) = supervision(&softmax_of(&logits)?)?;
    let mut store = ParamStore::new();
    let k = store.push("logits", logits);
    gradient_check_store(
        &mut store,
        |g, s| {
            let l = s.bind(g, k);
            let z = g.softmax(l)?;
            pseudo_label_loss(g, z, &labels)
        },
        EPS,
    )
}

fn check_mi(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = softmax_of(&clustered_logits(&mut rng, 6, 3))?;
    let (w, _, sim) = supervision(&z)?;
    let pairs: TripletBatch = sample_triplet_pairs(&w, &sim, SamplingStrategy::default(), 6, seed)?;
    let mut disc = DiscriminatorState::init(3, 4, 8, seed)?;
    // zero biases can leave a hidden unit exactly on the ReLU kink
    for p in disc.params.iter_mut() {
        p.value = signed(&mut rng, p.value.shape());
    }
    let mut store = disc.params.clone();
    let d = store.push("d", signed(&mut rng, &[6, 3]));
    let sh = store.push("s", signed(&mut rng, &[6, 4]));
    gradient_check_store(
        &mut store,
        |g, s| {
            let mut disc = disc.clone();
            for (dst, src) in disc.params.iter_mut().zip(s.iter()) {
                dst.value = src.value.clone();
            }
            let dv = s.bind(g, d);
            let sv = s.bind(g, sh);
            triplet_mi_loss(g, &disc, dv, sv, &pairs)
        },
        EPS,
    )
}

fn check_robustness(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = clustered_logits(&mut rng, 6, 3);
    let (w, labels, _) = supervision(&softmax_of(&logits)?)?;
    let mut perturbed = logits.clone();
    for v in perturbed.data_mut() {
        *v += rng.random_range(-0.5..0.5);
    }
    let mut store = ParamStore::new();
    let k = store.push("logits_t", perturbed);
    gradient_check_store(
        &mut store,
        |g, s| {
            let l = s.bind(g, k);
            let z_t = g.softmax(l)?;
            let sim = cosine_similarity(g, z_t)?;
            let (a, b) = robustness_losses(g, z_t, sim, &w, &labels)?;
            let b5 = g.scale(b, 5.0)?;
            g.add(a, b5)
        },
        EPS,
    )
}

/// The full objective through an encoder and discriminator, with the
/// transformed batch fixed.
fn check_full(encoder: EncoderState, x: Tensor, transform: TransformSpec, seed: u64) -> Result<f64> {
    let (alpha, beta) = (5.0, 0.1);
    let mut disc = DiscriminatorState::for_encoder(encoder.config(), 8, seed ^ 0x5a)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a);
    for p in disc.params.iter_mut() {
        p.value = signed(&mut rng, p.value.shape());
    }
    let xt = apply_transform(&x, &TransformSpec { seed, ..transform })?.x;
    let (z, _, _) = encoder.infer(&x)?;
    let s_fixed = SimilarityMatrix::of(&z)?;
    let w = build_pseudo_graph(&s_fixed, 0.95)?;
    // a low selection threshold keeps the label terms active at init
    let labels = assign_pseudo_labels(&z, 0.3)?;
    let pairs = sample_triplet_pairs(&w, &s_fixed, SamplingStrategy::default(), x.shape()[0], seed).ok();

    let build = |g: &mut Graph, enc: &EncoderState, disc: &DiscriminatorState| -> Result<Var> {
        let xv = g.constant(x.clone());
        let out = enc.forward(g, xv)?;
        let sim = cosine_similarity(g, out.z)?;
        let mut total = pseudo_graph_loss(g, sim, &w)?;
        let pl = pseudo_label_loss(g, out.z, &labels)?;
        let pl = g.scale(pl, alpha)?;
        total = g.add(total, pl)?;
        let xtv = g.constant(xt.clone());
        let out_t = enc.forward(g, xtv)?;
        let sim_t = cosine_similarity(g, out_t.z)?;
        let (a, b) = robustness_losses(g, out_t.z, sim_t, &w, &labels)?;
        total = g.add(total, a)?;
        let b = g.scale(b, alpha)?;
        total = g.add(total, b)?;
        if let Some(p) = &pairs {
            let mi = triplet_mi_loss(g, disc, out.d, out.s, p)?;
            let mi = g.scale(mi, beta)?;
            total = g.add(total, mi)?;
        }
        Ok(total)
    };
    let with = |src: &ParamStore, dst: &mut ParamStore| {
        for (d, s) in dst.iter_mut().zip(src.iter()) {
            d.value = s.value.clone();
        }
    };

    let mut enc_store = encoder.params.clone();
    let e1 = gradient_check_store(
        &mut enc_store,
        |g, s| {
            let mut e = encoder.clone();
            with(s, &mut e.params);
            build(g, &e, &disc)
        },
        EPS,
    )?;
    let mut disc_store = disc.params.clone();
    let e2 = gradient_check_store(
        &mut disc_store,
        |g, s| {
            let mut d = disc.clone();
            with(s, &mut d.params);
            build(g, &encoder, &d)
        },
        EPS,
    )?;
    Ok(e1.max(e2))
}

fn check_full_mlp(seed: u64) -> Result<f64> {
    use LayerSpec::*;
    let cfg = EncoderConfig {
        input_shape: vec![5],
        layers: vec![Linear { out: 6 }, Relu, Linear { out: 5 }, Relu, Linear { out: 3 }],
        shallow_tap: 1,
        deep_tap: 3,
        num_classes: 3,
        seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd00d);
    let x = uniform(&mut rng, &[4, 5], -2.0, 2.0);
    check_full(EncoderState::init(cfg)?, x, TransformSpec::noise(0.1), seed)
}

fn check_full_conv(seed: u64) -> Result<f64> {
    use LayerSpec::*;
    let cfg = EncoderConfig {
        input_shape: vec![1, 6, 6],
        layers: vec![
            Conv { out_channels: 2, kernel: 3, padding: Padding::Same },
            Affine,
            Relu,
            MaxPool { size: 2 },
            Linear { out: 4 },
            Relu,
            Linear { out: 3 },
        ],
        shallow_tap: 2,
        deep_tap: 5,
        num_classes: 3,
        seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    let x = uniform(&mut rng, &[4, 1, 6, 6], 0.0, 1.0);
    check_full(EncoderState::init(cfg)?, x, TransformSpec::default(), seed)
}

type LossCheck = fn(u64) -> Result<f64>;

fn loss_cases() -> Vec<(&'static str, LossCheck)> {
    vec![
        ("pseudo_graph_loss", check_pg),
        ("pseudo_label_loss", check_pl),
        ("triplet_mi_loss", check_mi),
        ("robustness_loss", check_robustness),
        ("dccm_total_mlp", check_full_mlp),
        ("dccm_total_conv", check_full_conv),
    ]
}

/// Runs every check on every seed.
pub fn run_gradient_suite(seeds: &[u64]) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, gen, op) in primitive_cases() {
        let mut worst: f64 = 0.0;
        for &s in seeds {
            worst = worst.max(check_primitive(gen, op, s)?);
        }
        out.push(CheckResult { name, kind: CheckKind::Primitive, max_error: worst, tolerance: PRIMITIVE_TOLERANCE });
    }
    for (name, check) in loss_cases() {
        let mut worst: f64 = 0.0;
        for &s in seeds {
            worst = worst.max(check(s)?);
        }
        out.push(CheckResult { name, kind: CheckKind::Loss, max_error: worst, tolerance: LOSS_TOLERANCE });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_seed_passes() {
        for r in run_gradient_suite(&[11]).unwrap() {
            assert!(r.passed(), "{} error {}", r.name, r.max_error);
        }
    }
}
