//! Random geometric perturbations and the losses that transfer the original
//! batch's supervision onto the perturbed batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::correlation::{pseudo_graph_loss, pseudo_label_loss, PseudoGraph, PseudoLabels};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which perturbations to sample, and their ranges. `None` disables a kind;
/// all `None` is the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformSpec {
    /// Maximum absolute rotation in degrees.
    pub rotation: Option<f64>,
    /// Maximum absolute translation as a fraction of each side.
    pub shift: Option<f64>,
    /// Inclusive range of isotropic scale factors.
    pub rescale: Option<(f64, f64)>,
    /// Probability of a horizontal flip.
    pub flip: Option<f64>,
    /// Standard deviation of additive Gaussian noise. The only kind that
    /// applies to vector (non-image) samples.
    pub noise: Option<f64>,
    pub seed: u64,
}

impl Default for TransformSpec {
    fn default() -> Self {
        TransformSpec {
            rotation: Some(25.0),
            shift: Some(0.1),
            rescale: Some((0.9, 1.1)),
            flip: Some(0.5),
            noise: None,
            seed: 0,
        }
    }
}

impl TransformSpec {
    pub fn identity() -> Self {
        TransformSpec { rotation: None, shift: None, rescale: None, flip: None, noise: None, seed: 0 }
    }

    /// Gaussian jitter only, for vector data.
    pub fn noise(std: f64) -> Self {
        TransformSpec { noise: Some(std), ..Self::identity() }
    }

    pub fn is_identity(&self) -> bool {
        !self.is_geometric() && self.noise.is_none()
    }

    pub fn is_geometric(&self) -> bool {
        self.rotation.is_some() || self.shift.is_some() || self.rescale.is_some() || self.flip.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if let Some(r) = self.rotation {
            if !(r.is_finite() && (0.0..=180.0).contains(&r)) {
                return bad(format!("rotation {r} outside [0, 180]"));
            }
        }
        if let Some(s) = self.shift {
            if !(s.is_finite() && (0.0..1.0).contains(&s)) {
                return bad(format!("shift {s} outside [0, 1)"));
            }
        }
        if let Some((lo, hi)) = self.rescale {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("rescale range ({lo}, {hi}) invalid"));
            }
        }
        if let Some(p) = self.flip {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("flip probability {p} outside [0, 1]"));
            }
        }
        if let Some(n) = self.noise {
            if !(n.is_finite() && n >= 0.0) {
                return bad(format!("noise std {n} invalid"));
            }
        }
        Ok(())
    }
}

/// Parameters drawn for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppliedTransform {
    /// Degrees; positive turns image content counter-clockwise.
    pub angle: f64,
    /// Translation in pixels along rows (down) and columns (right).
    pub dy: f64,
    pub dx: f64,
    pub scale: f64,
    pub flip: bool,
    pub noise: f64,
}

impl Default for AppliedTransform {
    fn default() -> Self {
        AppliedTransform { angle: 0.0, dy: 0.0, dx: 0.0, scale: 1.0, flip: false, noise: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformedBatch {
    pub x: Tensor,
    pub applied: Vec<AppliedTransform>,
}

fn sample_params(spec: &TransformSpec, rng: &mut ChaCha8Rng, h: usize, w: usize) -> AppliedTransform {
    let mut t = AppliedTransform::default();
    if let Some(r) = spec.rotation {
        t.angle = rng.random_range(-r..=r);
    }
    if let Some(s) = spec.shift {
        t.dy = rng.random_range(-s..=s) * h as f64;
        t.dx = rng.random_range(-s..=s) * w as f64;
    }
    if let Some((lo, hi)) = spec.rescale {
        t.scale = rng.random_range(lo..=hi);
    }
    if let Some(p) = spec.flip {
        t.flip = rng.random_bool(p);
    }
    if let Some(n) = spec.noise {
        t.noise = n;
    }
    t
}

/// Resamples one `[C, H, W]` image with nearest-neighbour lookup and
/// edge-replicate fill. The inverse map from output to source pixel is
/// untranslate, unrotate, unscale, unflip, all about the image centre.
pub fn warp_image(src: &[f64], c: usize, h: usize, w: usize, t: &AppliedTransform) -> Vec<f64> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let theta = t.angle.to_radians();
    let (sin, cos) = theta.sin_cos();
    let mut map = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let y = i as f64 - cy - t.dy;
            let x = j as f64 - cx - t.dx;
            let mut sx = (cos * x - sin * y) / t.scale;
            let sy = (sin * x + cos * y) / t.scale;
            if t.flip {
                sx = -sx;
            }
            let si = (sy + cy).round().clamp(0.0, h as f64 - 1.0) as usize;
            let sj = (sx + cx).round().clamp(0.0, w as f64 - 1.0) as usize;
            map.push(si * w + sj);
        }
    }
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        out.extend(map.iter().map(|&k| plane[k]));
    }
    out
}

/// Applies the fixed per-sample parameters to a batch.
pub fn apply_fixed(x: &Tensor, applied: &[AppliedTransform], noise_seed: u64) -> Result<Tensor> {
    let b = x.shape()[0];
    if applied.len() != b {
        return Err(Error::LengthMismatch { left: applied.len(), right: b });
    }
    let stride = x.row_len();
    let mut data = Vec::with_capacity(x.len());
    for (i, t) in applied.iter().enumerate() {
        let sample = x.row(i);
        let geometric = t.angle != 0.0 || t.dx != 0.0 || t.dy != 0.0 || t.scale != 1.0 || t.flip;
        let mut out = if geometric {
            let [c, h, w] = x.shape()[1..] else {
                return Err(Error::dim("transform", format!("geometric transform on {:?}", x.shape())));
            };
            warp_image(sample, c, h, w, t)
        } else {
            sample.to_vec()
        };
        if t.noise > 0.0 {
            let mut rng = sample_rng(noise_seed ^ 0x9e37_79b9_7f4a_7c15, i);
            let normal = Normal::new(0.0, t.noise).expect("finite std");
            for v in &mut out {
                *v += normal.sample(&mut rng);
            }
        }
        debug_assert_eq!(out.len(), stride);
        data.extend(out);
    }
    Tensor::new(x.shape().to_vec(), data)
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Perturbs each sample of `x` independently. Sample `i` draws its
/// parameters from a stream keyed by `(spec.seed, i)`.
pub fn apply_transform(x: &Tensor, spec: &TransformSpec) -> Result<TransformedBatch> {
    spec.validate()?;
    let b = x.shape()[0];
    if spec.is_identity() {
        return Ok(TransformedBatch { x: x.clone(), applied: vec![AppliedTransform::default(); b] });
    }
    let (h, w) = if spec.is_geometric() {
        match x.shape()[1..] {
            [_, h, w] if h >= 2 && w >= 2 => (h, w),
            [_, _, _] => {
                return Err(Error::DegenerateInput(format!(
                    "geometric transforms need H, W >= 2, got {:?}",
                    x.shape()
                )))
            }
            _ => {
                return Err(Error::dim(
                    "transform",
                    format!("geometric transforms need [B, C, H, W], got {:?}", x.shape()),
                ))
            }
        }
    } else {
        (1, 1)
    };
    let applied: Vec<AppliedTransform> = (0..b)
        .map(|i| sample_params(spec, &mut sample_rng(spec.seed, i), h, w))
        .collect();
    let xt = apply_fixed(x, &applied, spec.seed)?;
    Ok(TransformedBatch { x: xt, applied })
}

/// The original batch's graph and label supervision applied to predictions
/// on the transformed batch. Returns `(l_pg', l_pl')`.
pub fn robustness_losses(
    g: &mut Graph,
    z_t: Var,
    s_t: Var,
    w: &PseudoGraph,
    labels: &PseudoLabels,
) -> Result<(Var, Var)> {
    let b = g.value(z_t)?.shape()[0];
    if b != w.size() || b != labels.len() {
        return Err(Error::LengthMismatch { left: b, right: w.size().min(labels.len()) });
    }
    let l_pg = pseudo_graph_loss(g, s_t, w)?;
    let l_pl = pseudo_label_loss(g, z_t, labels)?;
    Ok((l_pg, l_pl))
}

/// Mean over samples of the squared distance between predictions.
pub fn feature_invariance_loss(g: &mut Graph, z: Var, z_t: Var) -> Result<Var> {
    let b = g.value(z)?.shape()[0];
    let diff = g.sub(z, z_t)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq)?;
    g.scale(total, 1.0 / b as f64)
}
