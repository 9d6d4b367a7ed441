//! Run configuration, read from and echoed as TOML.
//!
//! [`RunConfig::default`] is the full training protocol (50 epochs per
//! stage, learning rate 8e-6, dropout 0.1, 20 inference passes).
//! [`RunConfig::desk`] is a reduced setting for 64x64 phantoms on one CPU.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::ModelConfig;
use crate::nn::AdamConfig;

/// Cosine annealing from the stage learning rate down to `eta_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineSchedule {
    pub eta_min: f64,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        Self { eta_min: 1e-7 }
    }
}

impl CosineSchedule {
    /// Learning rate at epoch `t` of `total` (`t = total` gives `eta_min`).
    pub fn lr(&self, base: f64, t: usize, total: usize) -> f64 {
        if total == 0 {
            return base;
        }
        let frac = t.min(total) as f64 / total as f64;
        self.eta_min + 0.5 * (base - self.eta_min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTrainConfig {
    pub stage_index: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub dropout_rate: f64,
    pub scheduler: CosineSchedule,
    pub batch_size: usize,
    pub seed: u64,
    /// Clip the joint gradient norm of the stage parameters; unset disables it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
}

impl StageTrainConfig {
    pub fn protocol(stage_index: usize) -> Self {
        Self {
            stage_index,
            epochs: 50,
            learning_rate: 8e-6,
            weights: LossWeights::default(),
            dropout_rate: 0.1,
            scheduler: CosineSchedule::default(),
            batch_size: 4,
            seed: stage_index as u64,
            max_grad_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=3).contains(&self.stage_index) {
            return bad(format!("stage_index must be in 1..=3, got {}", self.stage_index));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0) || !m.is_finite()) {
            return bad("max_grad_norm must be > 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.scheduler.eta_min >= 0.0) || self.scheduler.eta_min > self.learning_rate {
            return bad("scheduler.eta_min must be in [0, learning_rate]".into());
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Draw a flip or 90-degree rotation per sample (90/270 only for square images).
    pub geometric: bool,
    /// Extra rotation drawn uniformly from `[-max, max]` degrees; 0 disables it.
    pub max_small_rotation_deg: f64,
    /// Attenuation contrast factor drawn from `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            geometric: true,
            max_small_rotation_deg: 10.0,
            jitter: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=45.0).contains(&self.max_small_rotation_deg) {
            return Err(Error::Config("max_small_rotation_deg must be in [0, 45]".into()));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config("jitter must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub passes: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { passes: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for weight initialisation.
    pub seed: u64,
    /// Seed for the train/val/test split of loaded datasets.
    pub split_seed: u64,
    /// Box-blur kernel of the residual consistency loss.
    pub blur_kernel: usize,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub inference: InferenceConfig,
    pub stages: Vec<StageTrainConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            split_seed: 0,
            blur_kernel: 5,
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            inference: InferenceConfig::default(),
            stages: (1..=3).map(StageTrainConfig::protocol).collect(),
        }
    }
}

impl RunConfig {
    /// Reduced setting for 64x64 phantoms: narrow networks, 3 epochs per
    /// stage, single-sample batches and learning rates large enough to make
    /// progress in that budget. Refinement stages start from the identity
    /// on the previous prediction and use a smaller rate. Small rotations
    /// are off because bilinear resampling smooths the target noise.
    pub fn desk() -> Self {
        let mut cfg = Self {
            model: ModelConfig {
                base_width: 16,
                levels: 4,
                disc_width: 16,
                ..ModelConfig::default()
            },
            augment: AugmentConfig {
                max_small_rotation_deg: 0.0,
                ..AugmentConfig::default()
            },
            ..Self::default()
        };
        for s in &mut cfg.stages {
            s.epochs = 3;
            s.batch_size = 1;
            s.learning_rate = if s.stage_index == 1 { 1e-3 } else { 3e-4 };
            s.scheduler.eta_min = 1e-4;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.levels < 2 {
            return Err(Error::Config("model.levels must be at least 2".into()));
        }
        if self.stages.len() != self.model.stages {
            return Err(Error::Config(format!(
                "{} stage configs for a {}-stage model",
                self.stages.len(),
                self.model.stages
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate()?;
            if s.stage_index != i + 1 {
                return Err(Error::Config("stage configs must be ordered by stage_index".into()));
            }
        }
        if self.blur_kernel % 2 == 0 || self.blur_kernel < 3 {
            return Err(Error::Config("blur_kernel must be odd and >= 3".into()));
        }
        if self.inference.passes == 0 {
            return Err(Error::Config("inference.passes must be >= 1".into()));
        }
        self.augment.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn stage(&self, k: usize) -> Result<&StageTrainConfig> {
        self.stages
            .get(k.wrapping_sub(1))
            .ok_or_else(|| Error::invalid(format!("no config for stage {k}")))
    }
}
