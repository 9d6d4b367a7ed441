//! Progressive generator, patch discriminator and checkpoint container.

mod checkpoint;
mod discriminator;
mod generator;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image2D;

pub use checkpoint::{load_checkpoint, load_stages_into, save_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use discriminator::{DiscTape, PatchDiscriminator, DOWNSAMPLE_FACTOR};
pub use generator::{
    GeneratorStage, ProgressiveGenerator, StageOutput, StageTape, ALPHA_FLOOR, ALPHA_INIT, BETA_INIT,
};

/// Architecture settings shared by training, inference and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of cascaded generator stages.
    pub stages: usize,
    /// Channel width of the first encoder level; doubles per level.
    pub base_width: usize,
    /// Resolution levels of each encoder-decoder.
    pub levels: usize,
    /// Dropout rate used in training and Monte Carlo inference.
    pub dropout: f64,
    /// Channel width of the first discriminator layer.
    pub disc_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            base_width: 32,
            levels: 4,
            dropout: 0.1,
            disc_width: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("model.stages must be at least 1".into()));
        }
        if self.base_width == 0 || self.disc_width == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if !(1..=6).contains(&self.levels) {
            return Err(Error::Config("model.levels must be in 1..=6".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("model.dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Spatial sides must be a multiple of this to pass through the encoder.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// Per-image min-max normalisation of a sigma map to `[0, 1]`; a constant
/// map becomes all `0.5`.
pub fn attention_from_sigma(sigma: &Image2D) -> Image2D {
    let (lo, hi) = (sigma.min(), sigma.max());
    let range = hi - lo;
    if !(range > 0.0) {
        return Image2D::filled(sigma.height(), sigma.width(), 0.5);
    }
    sigma.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// Slice-level variant used on network tensors.
pub(crate) fn attention_in_place(sigma: &mut [f32]) {
    let lo = sigma.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = sigma.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    if !(range > 0.0) {
        sigma.iter_mut().for_each(|v| *v = 0.5);
        return;
    }
    sigma
        .iter_mut()
        .for_each(|v| *v = ((*v - lo) / range).clamp(0.0, 1.0));
}
