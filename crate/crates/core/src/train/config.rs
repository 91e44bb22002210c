use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::objectives::LossWeights;
use crate::tensor::DType;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Two flows with temporal, registration and TV terms.
    Flowreg,
    /// Two flows through a shared latent space, adversarial + likelihood.
    Alignflow,
    /// One flow mapping X to Y directly.
    Cycleflow,
    /// Two feed-forward generators with cycle and identity losses.
    Cyclegan,
}

impl Mode {
    pub fn uses_flows(self) -> bool {
        !matches!(self, Mode::Cyclegan)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown mode `{s}`")))
    }
}

/// Synthetic data generated in place of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub seed: u64,
    pub subjects: usize,
    pub slices: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub weights: LossWeights,
    pub lr: f64,
    /// The learning rate is divided by `lr_decay_factor` every `lr_decay_every` epochs.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    /// Overrides the default of one pass over the larger training domain.
    pub steps_per_epoch: Option<usize>,
    pub batch: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Manifest of the training data; ignored when `phantom` is set.
    pub data: Option<PathBuf>,
    pub phantom: Option<PhantomConfig>,
    pub out: PathBuf,
    /// Checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub precision: DType,
    pub flow: FlowConfig,
    pub disc_width: usize,
    pub regnet_levels: usize,
    pub regnet_width: usize,
    pub generator_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Flowreg,
            weights: LossWeights::default(),
            lr: 2e-4,
            lr_decay_every: 20,
            lr_decay_factor: 10.0,
            epochs: 15,
            steps_per_epoch: None,
            batch: 2,
            image_size: 32,
            seed: 0,
            data: None,
            phantom: None,
            out: PathBuf::from("runs/default"),
            checkpoint_every: 0,
            precision: DType::F32,
            flow: FlowConfig::default(),
            disc_width: 64,
            regnet_levels: 2,
            regnet_width: 16,
            generator_width: 32,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.batch == 0 {
            return fail("batch must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.lr_decay_every == 0 || !(self.lr_decay_factor >= 1.0) {
            return fail("lr decay needs a positive interval and a factor >= 1".into());
        }
        if self.image_size < 16 || self.image_size % 4 != 0 {
            return fail(format!("image_size must be a multiple of 4 and >= 16, got {}", self.image_size));
        }
        if crate::nn::patchgan_output_size(self.image_size).is_none() {
            return fail(format!("image_size {} too small for the discriminator", self.image_size));
        }
        if self.regnet_levels == 0 || self.image_size % (1 << self.regnet_levels) != 0 {
            return fail(format!(
                "image_size {} not divisible by 2^regnet_levels ({})",
                self.image_size, self.regnet_levels
            ));
        }
        if self.disc_width == 0 || self.regnet_width == 0 || self.generator_width == 0 {
            return fail("network widths must be nonzero".into());
        }
        if self.flow.in_channels != 1 {
            return fail("flow.in_channels must be 1 for grayscale slices".into());
        }
        if self.data.is_none() && self.phantom.is_none() {
            return fail("either `data` (manifest path) or `phantom` must be set".into());
        }
        if let Some(p) = &self.phantom {
            if p.slices < 3 || p.subjects == 0 {
                return fail("phantom needs >= 1 subject and >= 3 slices".into());
            }
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        self.lr / self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// `base * 10^-floor(epoch / 20)`.
pub fn lr_at(epoch: usize, base: f64) -> f64 {
    base / 10f64.powi((epoch / 20) as i32)
}

/// Path of the configuration stored next to a checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}
