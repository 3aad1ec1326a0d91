//! Self-supervised blind-spot denoising for diffraction-limited images.
//!
//! A U-Net predicts a phantom image from a noisy observation; a fixed
//! convolution with the microscope's point spread function turns that
//! phantom into the denoised signal estimate. Training uses pixel masking so
//! no clean targets are needed, plus an optional penalty on negative phantom
//! values.

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
