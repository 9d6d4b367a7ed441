//! Minimal CPU tensor stack: NCHW `f32` tensors, im2col convolutions with
//! hand-written backward passes, and an Adam optimiser.
//!
//! Everything is single-threaded and free of hidden randomness; dropout
//! masks come from explicit per-sample seeds.

mod adam;
mod conv;
mod ops;
mod tensor;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use conv::Conv2d;
pub use ops::{
    avg_pool2, avg_pool2_backward, concat_channels, dropout, leaky_relu, leaky_relu_backward,
    split_channels, upsample2, upsample2_backward, LEAKY_SLOPE,
};
pub use tensor::{Param, Tensor};
