//! The clustering encoder and the mutual-information discriminator.
//!
//! The encoder maps a batch to softmax predictions `z` and exposes two
//! intermediate activations: a shallow feature `s` and a deep feature `d`,
//! tapped after configurable layers. The discriminator scores `(d, s)` pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Padding, ParamKey, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "same_padding")]
        padding: Padding,
    },
    MaxPool {
        size: usize,
    },
    AvgPool {
        size: usize,
    },
    /// Fully connected; flattens its input first.
    Linear {
        out: usize,
    },
    Relu,
    /// Trainable per-channel (or per-feature) scale and shift.
    Affine,
}

fn same_padding() -> Padding {
    Padding::Same
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Per-sample shape: `[C, H, W]` for images, `[D]` for vectors.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// The shallow feature is the flattened output of this layer.
    pub shallow_tap: usize,
    /// The deep feature is the flattened output of this layer.
    pub deep_tap: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Small convolutional encoder for `[C, H, W]` images.
    pub fn conv(input_shape: [usize; 3], num_classes: usize, seed: u64) -> Self {
        use LayerSpec::*;
        EncoderConfig {
            input_shape: input_shape.to_vec(),
            layers: vec![
                Conv { out_channels: 16, kernel: 3, padding: Padding::Same },
                Affine,
                Relu,
                MaxPool { size: 2 },
                Conv { out_channels: 32, kernel: 3, padding: Padding::Same },
                Affine,
                Relu,
                MaxPool { size: 2 },
                Linear { out: 64 },
                Relu,
                Linear { out: num_classes },
            ],
            shallow_tap: 6,
            deep_tap: 9,
            num_classes,
            seed,
        }
    }

    /// Multilayer perceptron for vector data.
    pub fn mlp(dim: usize, num_classes: usize, seed: u64) -> Self {
        use LayerSpec::*;
        EncoderConfig {
            input_shape: vec![dim],
            layers: vec![
                Linear { out: 64 },
                Relu,
                Linear { out: 32 },
                Relu,
                Linear { out: num_classes },
            ],
            shallow_tap: 1,
            deep_tap: 3,
            num_classes,
            seed,
        }
    }

    /// Per-sample output shape of every layer.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("bad input shape {:?}", self.input_shape)));
        }
        let mut cur = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Conv { out_channels, kernel, padding } => {
                    let [_, h, w] = cur[..] else {
                        return Err(Error::Config(format!("layer {i}: conv needs [C, H, W] input, got {cur:?}")));
                    };
                    let shrink = match padding {
                        Padding::Same if kernel % 2 == 1 => 0,
                        Padding::Same => {
                            return Err(Error::Config(format!("layer {i}: same padding needs an odd kernel")));
                        }
                        Padding::Valid => kernel - 1,
                    };
                    if *kernel == 0 || h <= shrink || w <= shrink || *out_channels == 0 {
                        return Err(Error::Config(format!("layer {i}: conv does not fit {cur:?}")));
                    }
                    vec![*out_channels, h - shrink, w - shrink]
                }
                LayerSpec::MaxPool { size } | LayerSpec::AvgPool { size } => {
                    let [c, h, w] = cur[..] else {
                        return Err(Error::Config(format!("layer {i}: pooling needs [C, H, W] input")));
                    };
                    if *size == 0 || h < *size || w < *size {
                        return Err(Error::Config(format!("layer {i}: pool {size} on {cur:?}")));
                    }
                    vec![c, h / size, w / size]
                }
                LayerSpec::Linear { out } => {
                    if *out == 0 {
                        return Err(Error::Config(format!("layer {i}: zero-width linear")));
                    }
                    vec![*out]
                }
                LayerSpec::Relu | LayerSpec::Affine => cur.clone(),
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.layer_shapes()?;
        let n = self.layers.len();
        match self.layers.last() {
            Some(LayerSpec::Linear { out }) if *out == self.num_classes => {}
            _ => {
                return Err(Error::Config(format!(
                    "final layer must be linear with {} outputs",
                    self.num_classes
                )))
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if !(self.shallow_tap < self.deep_tap && self.deep_tap < n) {
            return Err(Error::Config(format!(
                "taps must satisfy shallow ({}) < deep ({}) < softmax ({n})",
                self.shallow_tap, self.deep_tap
            )));
        }
        debug_assert_eq!(shapes.len(), n);
        Ok(())
    }

    pub fn shallow_dim(&self) -> Result<usize> {
        Ok(self.layer_shapes()?[self.shallow_tap].iter().product())
    }

    pub fn deep_dim(&self) -> Result<usize> {
        Ok(self.layer_shapes()?[self.deep_tap].iter().product())
    }
}

/// Scaled-uniform initialization: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn scaled_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

#[derive(Clone, Debug)]
enum Bound {
    Conv { w: ParamKey, b: ParamKey, padding: Padding },
    Linear { w: ParamKey, b: ParamKey },
    Affine { scale: ParamKey, shift: ParamKey },
    MaxPool(usize),
    AvgPool(usize),
    Relu,
}

/// Encoder parameters plus the config they were built from.
#[derive(Clone, Debug)]
pub struct EncoderState {
    config: EncoderConfig,
    pub params: ParamStore,
    layers: Vec<Bound>,
}

/// Graph handles produced by one encoder forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// Softmax predictions, `[B, K]`.
    pub z: Var,
    /// Deep feature, `[B, D]`.
    pub d: Var,
    /// Shallow feature, `[B, S]`.
    pub s: Var,
    /// Input of the final linear layer, `[B, F]`.
    pub penultimate: Var,
}

impl EncoderState {
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut cur = config.input_shape.clone();
        for (i, spec) in config.layers.iter().enumerate() {
            let bound = match spec {
                LayerSpec::Conv { out_channels, kernel, padding } => {
                    let c = cur[0];
                    let shape = [*out_channels, c, *kernel, *kernel];
                    let area = kernel * kernel;
                    let w = params.push(
                        format!("layer{i}.weight"),
                        scaled_uniform(&mut rng, &shape, c * area, out_channels * area),
                    );
                    let b = params.push(format!("layer{i}.bias"), Tensor::zeros(&[*out_channels]));
                    Bound::Conv { w, b, padding: *padding }
                }
                LayerSpec::Linear { out } => {
                    let fan_in: usize = cur.iter().product();
                    let w = params.push(
                        format!("layer{i}.weight"),
                        scaled_uniform(&mut rng, &[*out, fan_in], fan_in, *out),
                    );
                    let b = params.push(format!("layer{i}.bias"), Tensor::zeros(&[*out]));
                    Bound::Linear { w, b }
                }
                LayerSpec::Affine => {
                    let c = cur[0];
                    let scale = params.push(format!("layer{i}.scale"), Tensor::full(&[c], 1.0));
                    let shift = params.push(format!("layer{i}.shift"), Tensor::zeros(&[c]));
                    Bound::Affine { scale, shift }
                }
                LayerSpec::MaxPool { size } => Bound::MaxPool(*size),
                LayerSpec::AvgPool { size } => Bound::AvgPool(*size),
                LayerSpec::Relu => Bound::Relu,
            };
            layers.push(bound);
            cur = shapes[i].clone();
        }
        Ok(EncoderState { config, params, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn forward(&self, g: &mut Graph, batch: Var) -> Result<EncoderOutput> {
        let taps = self.layer_outputs(g, batch)?;
        let b = g.value(batch)?.shape()[0];
        let n = taps.len();
        let logits = taps[n - 1];
        let z = g.softmax(logits)?;
        let s = flatten(g, taps[self.config.shallow_tap], b)?;
        let d = flatten(g, taps[self.config.deep_tap], b)?;
        let penultimate = if n >= 2 { flatten(g, taps[n - 2], b)? } else { flatten(g, batch, b)? };
        Ok(EncoderOutput { z, d, s, penultimate })
    }

    /// Data-dependent initialization. Each conv and linear layer, in order,
    /// is rescaled so that its outputs have zero mean and unit variance per
    /// channel over `batch`. Dead channels (zero variance) are only centred.
    pub fn data_init(&mut self, batch: &Tensor) -> Result<()> {
        if batch.shape().first().copied().unwrap_or(0) < 2 {
            return Err(Error::DegenerateInput("data-dependent init needs at least two samples".into()));
        }
        for i in 0..self.layers.len() {
            let (w, b) = match &self.layers[i] {
                Bound::Conv { w, b, .. } | Bound::Linear { w, b } => (*w, *b),
                _ => continue,
            };
            let mut g = Graph::new();
            let x = g.constant(batch.clone());
            let taps = self.layer_outputs(&mut g, x)?;
            let out = g.value(taps[i])?;
            let channels = out.shape()[1];
            let inner: usize = out.shape()[2..].iter().product();
            let count = (out.shape()[0] * inner) as f64;
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for (j, v) in out.data().iter().enumerate() {
                mean[(j / inner) % channels] += v / count;
            }
            for (j, v) in out.data().iter().enumerate() {
                let c = (j / inner) % channels;
                var[c] += (v - mean[c]).powi(2) / count;
            }
            let sd: Vec<f64> = var.iter().map(|v| if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 }).collect();
            let wt = &mut self.params.get_mut(w).value;
            let per = wt.len() / channels;
            for (j, v) in wt.data_mut().iter_mut().enumerate() {
                *v /= sd[j / per];
            }
            let bt = &mut self.params.get_mut(b).value;
            for (c, v) in bt.data_mut().iter_mut().enumerate() {
                *v = (*v - mean[c]) / sd[c];
            }
        }
        Ok(())
    }

    fn layer_outputs(&self, g: &mut Graph, batch: Var) -> Result<Vec<Var>> {
        let shape = g.value(batch)?.shape().to_vec();
        if shape.len() != self.config.input_shape.len() + 1 || shape[1..] != self.config.input_shape[..] {
            return Err(Error::dim(
                "encoder",
                format!("batch {shape:?} does not match input shape {:?}", self.config.input_shape),
            ));
        }
        let b = shape[0];
        let mut x = batch;
        let mut taps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = match layer {
                Bound::Conv { w, b: bias, padding } => {
                    let wv = self.params.bind(g, *w);
                    let bv = self.params.bind(g, *bias);
                    g.conv2d(x, wv, Some(bv), *padding)?
                }
                Bound::Linear { w, b: bias } => {
                    let x2 = flatten(g, x, b)?;
                    let wv = self.params.bind(g, *w);
                    let wt = g.transpose(wv)?;
                    let y = g.matmul(x2, wt)?;
                    let bv = self.params.bind(g, *bias);
                    g.add_row_bias(y, bv)?
                }
                Bound::Affine { scale, shift } => {
                    let s = self.params.bind(g, *scale);
                    let t = self.params.bind(g, *shift);
                    let xs = g.value(x)?.shape().to_vec();
                    if xs.len() == 2 {
                        let x4 = g.reshape(x, vec![xs[0], xs[1], 1, 1])?;
                        let y = g.channel_affine(x4, s, t)?;
                        g.reshape(y, xs)?
                    } else {
                        g.channel_affine(x, s, t)?
                    }
                }
                Bound::MaxPool(k) => g.maxpool2d(x, *k)?,
                Bound::AvgPool(k) => g.avgpool2d(x, *k)?,
                Bound::Relu => g.relu(x)?,
            };
            taps.push(x);
        }
        Ok(taps)
    }

    /// Gradient-free forward returning `(z, d, s)` values.
    pub fn infer(&self, batch: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let out = self.forward(&mut g, x)?;
        Ok((g.value(out.z)?.clone(), g.value(out.d)?.clone(), g.value(out.s)?.clone()))
    }
}

fn flatten(g: &mut Graph, x: Var, batch: usize) -> Result<Var> {
    let shape = g.value(x)?.shape().to_vec();
    if shape.len() == 2 {
        return Ok(x);
    }
    let width = shape[1..].iter().product();
    g.reshape(x, vec![batch, width])
}

/// Three-layer scorer `T(d, s)` over concatenated feature pairs.
#[derive(Clone, Debug)]
pub struct DiscriminatorState {
    pub params: ParamStore,
    deep_dim: usize,
    shallow_dim: usize,
    hidden: usize,
    seed: u64,
    layers: [(ParamKey, ParamKey); 3],
}

impl DiscriminatorState {
    pub const DEFAULT_HIDDEN: usize = 128;

    pub fn init(deep_dim: usize, shallow_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if deep_dim == 0 || shallow_dim == 0 || hidden == 0 {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let widths = [deep_dim + shallow_dim, hidden, hidden, 1];
        let mut keys = Vec::with_capacity(3);
        for i in 0..3 {
            let (fi, fo) = (widths[i], widths[i + 1]);
            let w = params.push(format!("disc{i}.weight"), scaled_uniform(&mut rng, &[fo, fi], fi, fo));
            let b = params.push(format!("disc{i}.bias"), Tensor::zeros(&[fo]));
            keys.push((w, b));
        }
        Ok(DiscriminatorState {
            params,
            deep_dim,
            shallow_dim,
            hidden,
            seed,
            layers: [keys[0], keys[1], keys[2]],
        })
    }

    /// Sized for the taps of `encoder`.
    pub fn for_encoder(encoder: &EncoderConfig, hidden: usize, seed: u64) -> Result<Self> {
        Self::init(encoder.deep_dim()?, encoder.shallow_dim()?, hidden, seed)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Zeroes the output layer, making every score exactly 0.
    pub fn zero_output_layer(&mut self) {
        let (w, b) = self.layers[2];
        for k in [w, b] {
            let p = self.params.get_mut(k);
            p.value = Tensor::zeros(p.value.shape());
        }
    }

    /// One score per row pair of `d` (`[B, D]`) and `s` (`[B, S]`); returns `[B]`.
    pub fn score(&self, g: &mut Graph, d: Var, s: Var) -> Result<Var> {
        let (ds, ss) = (g.value(d)?.shape().to_vec(), g.value(s)?.shape().to_vec());
        if ds.len() != 2 || ss.len() != 2 || ds[0] != ss[0] {
            return Err(Error::dim("discriminator", format!("d {ds:?} vs s {ss:?}")));
        }
        if ds[1] != self.deep_dim || ss[1] != self.shallow_dim {
            return Err(Error::dim(
                "discriminator",
                format!(
                    "trained for widths ({}, {}), got ({}, {})",
                    self.deep_dim, self.shallow_dim, ds[1], ss[1]
                ),
            ));
        }
        let mut x = g.concat(&[d, s])?;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let wv = self.params.bind(g, *w);
            let wt = g.transpose(wv)?;
            let y = g.matmul(x, wt)?;
            let bv = self.params.bind(g, *b);
            x = g.add_row_bias(y, bv)?;
            if i < 2 {
                x = g.relu(x)?;
            }
        }
        g.reshape(x, vec![ds[0]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;

    fn batch(b: usize, shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut full = vec![b];
        full.extend_from_slice(shape);
        let n: usize = full.iter().product();
        Tensor::new(full, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_encoder_rows_sum_to_one() {
        let cfg = EncoderConfig::conv([3, 8, 8], 10, 7);
        let enc = EncoderState::init(cfg).unwrap();
        let (z, d, s) = enc.infer(&batch(4, &[3, 8, 8], 1)).unwrap();
        assert_eq!(z.shape(), &[4, 10]);
        assert_eq!(d.shape(), &[4, 64]);
        assert_eq!(s.shape(), &[4, 32 * 4 * 4]);
        for r in 0..4 {
            assert!((z.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(z.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn duplicated_samples_give_identical_rows() {
        let enc = EncoderState::init(EncoderConfig::mlp(5, 3, 1)).unwrap();
        let one = batch(1, &[5], 3);
        let two = Tensor::new(vec![2, 5], [one.data(), one.data()].concat()).unwrap();
        let (z, _, _) = enc.infer(&two).unwrap();
        assert_eq!(z.row(0), z.row(1));
        let (z2, _, _) = enc.infer(&two).unwrap();
        assert_eq!(z, z2);
    }

    #[test]
    fn init_is_seeded() {
        let a = EncoderState::init(EncoderConfig::mlp(4, 3, 11)).unwrap();
        let b = EncoderState::init(EncoderConfig::mlp(4, 3, 11)).unwrap();
        let c = EncoderState::init(EncoderConfig::mlp(4, 3, 12)).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert_ne!(a.params.checksum(), c.params.checksum());
    }

    #[test]
    fn linear_weight_is_out_by_in() {
        let mut cfg = EncoderConfig::mlp(64, 10, 0);
        cfg.layers = vec![LayerSpec::Relu, LayerSpec::Affine, LayerSpec::Linear { out: 10 }];
        cfg.shallow_tap = 0;
        cfg.deep_tap = 1;
        let enc = EncoderState::init(cfg).unwrap();
        assert_eq!(enc.params.find("layer2.weight").unwrap().value.shape(), &[10, 64]);
        assert_eq!(enc.params.find("layer2.bias").unwrap().value.shape(), &[10]);
    }

    #[test]
    fn bad_tap_order_is_config_error() {
        let mut cfg = EncoderConfig::mlp(4, 3, 0);
        cfg.shallow_tap = 3;
        cfg.deep_tap = 1;
        assert!(matches!(EncoderState::init(cfg), Err(Error::Config(_))));
        let mut cfg = EncoderConfig::mlp(4, 3, 0);
        cfg.layers.push(LayerSpec::Relu);
        assert!(matches!(EncoderState::init(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_batch_shape_is_dimension_error() {
        let enc = EncoderState::init(EncoderConfig::mlp(4, 3, 0)).unwrap();
        assert!(matches!(enc.infer(&batch(2, &[5], 0)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn taps_ignore_later_layers() {
        let base = EncoderConfig::mlp(6, 3, 5);
        let mut wider = base.clone();
        wider.layers.insert(4, LayerSpec::Affine);
        wider.layers.insert(5, LayerSpec::Linear { out: 9 });
        let a = EncoderState::init(base).unwrap();
        let b = EncoderState::init(wider).unwrap();
        let x = batch(3, &[6], 2);
        let (_, da, sa) = a.infer(&x).unwrap();
        let (_, db, sb) = b.infer(&x).unwrap();
        assert_eq!(da, db);
        assert_eq!(sa, sb);
    }

    #[test]
    fn zeroed_discriminator_scores_zero() {
        let mut disc = DiscriminatorState::init(4, 6, 16, 3).unwrap();
        disc.zero_output_layer();
        let mut g = Graph::new();
        let d = g.constant(batch(8, &[4], 1));
        let s = g.constant(batch(8, &[6], 2));
        let t = disc.score(&mut g, d, s).unwrap();
        assert_eq!(g.value(t).unwrap().data(), &[0.0; 8]);
    }

    #[test]
    fn discriminator_width_mismatch() {
        let disc = DiscriminatorState::init(4, 6, 16, 3).unwrap();
        let mut g = Graph::new();
        let d = g.constant(batch(2, &[5], 1));
        let s = g.constant(batch(2, &[6], 2));
        assert!(matches!(disc.score(&mut g, d, s), Err(Error::Dimension { .. })));
    }

    #[test]
    fn discriminator_gradient_wrt_deep_feature() {
        let disc = DiscriminatorState::init(3, 4, 8, 9).unwrap();
        let s = batch(5, &[4], 4);
        let d = batch(5, &[3], 5).map(|v| v - 0.5);
        let err = gradient_check(
            |g, dv| {
                let sv = g.constant(s.clone());
                let t = disc.score(g, dv, sv)?;
                g.mean(t)
            },
            &d,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
