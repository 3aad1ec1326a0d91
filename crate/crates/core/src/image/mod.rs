//! Image formation: phantoms, PSF blurring, pixel noise and the file formats
//! that carry them.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

mod dataset;
pub mod io;
mod noise;
mod phantom;
mod psf;

pub use dataset::{synthesize_dataset, DatasetEntry, DatasetManifest, GenerationParams};
pub use noise::{add_noise, NoiseSpec, NoisyImage};
pub use phantom::{generate_phantoms, PhantomKind};
pub use psf::{convolve_psf, default_psf_size, PsfKernel};

/// Single-channel raster with row-major `f32` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

/// Distribution of emitters before optical blurring.
pub type Phantom = Image;

/// Noise-free detector image, `phantom * psf`.
pub type Signal = Image;

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image extents {height}x{width} must be positive")));
        }
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "pixel ({}, {}) is not finite",
                i / width,
                i % width
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.pixels[row * self.width + col] = value;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies the `height × width` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Image> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width} at ({row}, {col}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(height * width);
        for r in row..row + height {
            pixels.extend_from_slice(&self.pixels[r * self.width + col..r * self.width + col + width]);
        }
        Ok(Image { height, width, pixels })
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.pixels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.len() as f64
    }

    /// `[1, 1, H, W]` tensor view of the pixels, cast to `T`.
    pub fn to_tensor<T: crate::tensor::Element>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, 1, self.height, self.width],
            self.pixels.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("image extents are positive")
    }

    /// Inverse of [`to_tensor`](Self::to_tensor) for single-item, single-channel tensors.
    pub fn from_tensor<T: crate::tensor::Element>(t: &Tensor<T>) -> Result<Image> {
        match *t.shape() {
            [1, 1, h, w] | [h, w] => Image::new(h, w, t.data().iter().map(|v| v.as_f64() as f32).collect()),
            _ => Err(Error::Shape(format!(
                "expected a [1, 1, H, W] or [H, W] tensor, got {:?}",
                t.shape()
            ))),
        }
    }
}
