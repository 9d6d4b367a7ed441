//! Uncertainty-guided progressive GAN for synthesising dark-field radiographs
//! from attenuation radiographs.
//!
//! The crate bundles everything needed to train and evaluate the model at
//! desk scale on a single CPU:
//!
//! * [`image`]: the single-channel [`Image2D`] raster and pure image math.
//! * [`ggd`]: generalized Gaussian scale/shape maps, effective sigma, NLL and sampling.
//! * [`nn`] and [`network`]: a small im2col convolution stack, the staged
//!   encoder-decoder generator and the conditional patch discriminator.
//! * [`losses`], [`trainer`]: the adversarial objective and the progressive
//!   three-stage training loop.
//! * [`inference`]: Monte Carlo dropout inference producing aleatoric and
//!   epistemic uncertainty maps.
//! * [`metrics`]: MSE, PSNR and SSIM with per-stage reporting.
//! * [`data`]: phantom pair generation, dataset ingestion and OOD loading.
//! * [`commands`]: the implementations behind the `dfgan` binary.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod ggd;
pub mod image;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod panel;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
pub use ggd::GgdParams;
pub use image::Image2D;
