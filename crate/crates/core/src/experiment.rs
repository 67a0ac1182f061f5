//! Experiment configuration, as read from JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::correlation::SamplingStrategy;
use crate::data::{generate_blobs, load_cifar_binary, load_dataset, BlobsSpec, Dataset};
use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::robustness::TransformSpec;

/// Where samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Blobs(BlobsSpec),
    /// CIFAR-10 binary batch files, optionally restricted to some classes.
    Cifar {
        paths: Vec<PathBuf>,
        #[serde(default)]
        classes: Option<Vec<usize>>,
        #[serde(default)]
        per_class: Option<usize>,
    },
    /// A `DTNS` samples file (labels read from `<path>.labels` if present).
    Tensor { path: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Blobs(BlobsSpec::default())
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Blobs(b) => generate_blobs(b),
            DatasetSpec::Cifar { paths, classes, per_class } => {
                let ds = load_cifar_binary(paths)?;
                match classes {
                    Some(c) => ds.filter_classes(c, *per_class),
                    None if per_class.is_some() => {
                        let all: Vec<usize> = (0..10).collect();
                        ds.filter_classes(&all, *per_class)
                    }
                    None => Ok(ds),
                }
            }
            DatasetSpec::Tensor { path } => load_dataset(path),
        }
    }
}

/// Encoder architecture; the presets are sized from the data at load time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    Mlp { num_classes: usize },
    Conv { num_classes: usize },
    Custom(EncoderConfig),
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::Mlp { num_classes: 4 }
    }
}

impl EncoderSpec {
    pub fn resolve(&self, sample_shape: &[usize], seed: u64) -> Result<EncoderConfig> {
        let cfg = match self {
            EncoderSpec::Mlp { num_classes } => {
                let dim = sample_shape.iter().product();
                EncoderConfig::mlp(dim, *num_classes, seed)
            }
            EncoderSpec::Conv { num_classes } => {
                let [c, h, w] = <[usize; 3]>::try_from(sample_shape).map_err(|_| {
                    Error::Config(format!("conv encoder needs [C, H, W] samples, got {sample_shape:?}"))
                })?;
                EncoderConfig::conv([c, h, w], *num_classes, seed)
            }
            EncoderSpec::Custom(c) => c.clone(),
        };
        if cfg.input_shape != sample_shape {
            return Err(Error::Config(format!(
                "encoder expects {:?} but samples are {sample_shape:?}",
                cfg.input_shape
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which terms of the objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossToggles {
    pub use_robustness: bool,
    pub use_pseudo_label: bool,
    pub use_mi: bool,
    pub use_feature_invariance: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Ablation::M4.toggles()
    }
}

/// The four cumulative objectives of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// Pseudo-graph loss only.
    M1,
    /// Pseudo-graph loss on original and transformed batches.
    M2,
    /// Adds the pseudo-label loss on both batches.
    M3,
    /// Adds the triplet mutual-information loss.
    M4,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::M1, Ablation::M2, Ablation::M3, Ablation::M4];

    pub fn toggles(self) -> LossToggles {
        let on = |min: Ablation| self as u8 >= min as u8;
        LossToggles {
            use_robustness: on(Ablation::M2),
            use_pseudo_label: on(Ablation::M3),
            use_mi: on(Ablation::M4),
            use_feature_invariance: false,
        }
    }
}

/// How often and what to evaluate during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    /// BCubed diagnostics run on epoch 1, every `bcubed_every` epochs and
    /// on the final epoch.
    pub bcubed_every: usize,
    pub bcubed_thresholds: Vec<f64>,
    /// Cap on samples used for BCubed (it is quadratic in N).
    pub bcubed_max_samples: usize,
    /// Inference chunk size.
    pub chunk: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            bcubed_every: 10,
            bcubed_thresholds: vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99],
            bcubed_max_samples: 1000,
            chunk: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub encoder: EncoderSpec,
    pub thres1: f64,
    pub thres2: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Weight of the optional prediction-invariance term.
    pub gamma: f64,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` picks geometric defaults for images and Gaussian noise
    /// (a tenth of the data's standard deviation) for vectors.
    pub transform: Option<TransformSpec>,
    pub sampling: SamplingStrategy,
    /// Anchors per batch for the mutual-information loss; `None` uses the
    /// whole batch.
    pub mi_pairs: Option<usize>,
    pub toggles: LossToggles,
    pub discriminator_hidden: usize,
    /// Samples used for data-dependent encoder initialization (0 keeps the
    /// plain random init).
    pub init_samples: usize,
    /// Master seed. Encoder init, discriminator init and the training
    /// stream are derived from it.
    pub seed: u64,
    pub eval: EvalSettings,
    /// Save `last.dccm` every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            encoder: EncoderSpec::default(),
            thres1: 0.95,
            thres2: 0.9,
            alpha: 5.0,
            beta: 0.1,
            gamma: 0.0,
            learning_rate: 1e-4,
            rmsprop_decay: 0.99,
            rmsprop_eps: 1e-8,
            epochs: 200,
            batch_size: 32,
            transform: None,
            sampling: SamplingStrategy::default(),
            mi_pairs: None,
            toggles: LossToggles::default(),
            discriminator_hidden: 128,
            init_samples: 256,
            seed: 0,
            eval: EvalSettings::default(),
            checkpoint_every: 1,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn with_ablation(mut self, a: Ablation) -> Self {
        self.toggles = a.toggles();
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, t) in [("thres1", self.thres1), ("thres2", self.thres2)] {
            if !(t > 0.0 && t < 1.0) {
                return bad(format!("{name} = {t} must lie in (0, 1)"));
            }
        }
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} = {w} must be finite and >= 0"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate = {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) || !(self.rmsprop_eps > 0.0) {
            return bad("rmsprop_decay must be in [0, 1) and rmsprop_eps > 0".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size = {} must be at least 2", self.batch_size));
        }
        if self.mi_pairs == Some(0) {
            return bad("mi_pairs must be positive".into());
        }
        if self.discriminator_hidden == 0 {
            return bad("discriminator_hidden must be positive".into());
        }
        if self.toggles.use_feature_invariance && !self.toggles.use_robustness {
            return bad("use_feature_invariance needs use_robustness (it compares against the transformed batch)".into());
        }
        if let Some(t) = &self.transform {
            t.validate()?;
        }
        if self.eval.chunk == 0 {
            return bad("eval.chunk must be positive".into());
        }
        if self.eval.bcubed_thresholds.iter().any(|t| !t.is_finite()) {
            return bad("bcubed thresholds must be finite".into());
        }
        Ok(())
    }

    /// Seed for an independent sub-stream of the master seed.
    pub fn derived_seed(&self, stream: u64) -> u64 {
        splitmix64(self.seed ^ splitmix64(stream.wrapping_add(0x5eed)))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
