use super::Image;
use crate::error::{Error, Result};
use crate::tensor::{reflect_index, PadMode};

/// Normalised square blurring kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfKernel {
    size: usize,
    weights: Vec<f32>,
    sigma: f64,
}

/// Kernel extent covering ±3σ: `2·ceil(3σ) + 1`, at least 3 for σ > 0 and 1
/// for the delta kernel.
pub fn default_psf_size(sigma: f64) -> usize {
    if sigma <= 0.0 {
        1
    } else {
        (2 * (3.0 * sigma).ceil() as usize + 1).max(3)
    }
}

impl PsfKernel {
    /// Discrete Gaussian sampled at pixel centres and normalised to unit sum.
    /// `sigma == 0` gives the delta kernel.
    pub fn gaussian(sigma: f64, size: usize) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("PSF size {size} must be odd")));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "PSF sigma {sigma} must be finite and non-negative"
            )));
        }
        let r = (size / 2) as isize;
        let raw: Vec<f64> = if sigma == 0.0 {
            (0..size * size)
                .map(|i| if i == size * size / 2 { 1.0 } else { 0.0 })
                .collect()
        } else {
            let two_var = 2.0 * sigma * sigma;
            (-r..=r)
                .flat_map(|dy| (-r..=r).map(move |dx| (-((dx * dx + dy * dy) as f64) / two_var).exp()))
                .collect()
        };
        let total: f64 = raw.iter().sum();
        Ok(Self {
            size,
            weights: raw.iter().map(|w| (w / total) as f32).collect(),
            sigma,
        })
    }

    /// Gaussian with the default ±3σ support.
    pub fn gaussian_default(sigma: f64) -> Result<Self> {
        Self::gaussian(sigma, default_psf_size(sigma))
    }

    pub fn delta() -> Self {
        Self {
            size: 1,
            weights: vec![1.0],
            sigma: 0.0,
        }
    }

    /// Arbitrary kernel; must be odd-sized, non-negative and sum to one.
    pub fn from_weights(size: usize, weights: Vec<f32>, sigma: f64) -> Result<Self> {
        if size.is_multiple_of(2) || weights.len() != size * size {
            return Err(Error::InvalidArgument(format!(
                "PSF needs an odd size and size² weights, got size {size} with {} weights",
                weights.len()
            )));
        }
        if weights.iter().any(|w| w.is_nan() || *w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidArgument(
                "PSF weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().map(|&w| w as f64).sum();
        if (total - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidArgument(format!(
                "PSF weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { size, weights, sigma })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weight(&self, row: usize, col: usize) -> f32 {
        self.weights[row * self.size + col]
    }

    /// True when the kernel is the identity (unit weight at the centre only).
    pub fn is_delta(&self) -> bool {
        let centre = self.weights.len() / 2;
        self.weights
            .iter()
            .enumerate()
            .all(|(i, &w)| if i == centre { w == 1.0 } else { w == 0.0 })
    }

    /// Kernel rotated by 180°, i.e. the cross-correlation filter that
    /// implements convolution with `self`.
    pub fn flipped(&self) -> Vec<f32> {
        self.weights.iter().rev().copied().collect()
    }
}

/// Same-size convolution `image * psf` by direct summation.
pub fn convolve_psf(image: &Image, psf: &PsfKernel, pad: PadMode) -> Result<Image> {
    let (h, w, k) = (image.height(), image.width(), psf.size());
    if h < k || w < k {
        return Err(Error::Shape(format!("{h}x{w} image is smaller than the {k}x{k} PSF")));
    }
    let r = (k / 2) as isize;
    let px = image.pixels();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0f64;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sy, sx) = (y - dy, x - dx);
                    let v = match pad {
                        PadMode::Reflect => px[reflect_index(sy, h) * w + reflect_index(sx, w)],
                        PadMode::Zero if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize => continue,
                        PadMode::Zero => px[sy as usize * w + sx as usize],
                    };
                    acc += v as f64 * psf.weight((dy + r) as usize, (dx + r) as usize) as f64;
                }
            }
            out.push(acc as f32);
        }
    }
    Image::new(h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_delta() {
        let psf = PsfKernel::gaussian(0.0, 5).unwrap();
        for (i, w) in psf.weights().iter().enumerate() {
            assert_eq!(*w, if i == 12 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn gaussian_is_symmetric_and_normalised() {
        let psf = PsfKernel::gaussian(1.0, 5).unwrap();
        let sum: f64 = psf.weights().iter().map(|&w| w as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for r in 0..5 {
            for c in 0..5 {
                let w = psf.weight(r, c);
                assert_eq!(w, psf.weight(c, 4 - r), "90° rotation");
                assert_eq!(w, psf.weight(r, 4 - c), "mirror");
                assert_eq!(w, psf.weight(4 - r, 4 - c), "point symmetry");
                assert!(w >= 0.0);
            }
        }
    }

    #[test]
    fn centre_weight_matches_direct_evaluation() {
        let psf = PsfKernel::gaussian(1.0, 5).unwrap();
        let mut norm = 0.0f64;
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                norm += (-((dx * dx + dy * dy) as f64) / 2.0).exp();
            }
        }
        let expected = 1.0 / norm;
        assert!((psf.weight(2, 2) as f64 - expected).abs() < 1e-7);
        // frozen from the evaluation above
        assert!((expected - 0.162_102_82).abs() < 1e-7);
    }

    #[test]
    fn even_size_rejected() {
        assert!(PsfKernel::gaussian(1.0, 4).is_err());
    }

    #[test]
    fn default_support_rule() {
        assert_eq!(default_psf_size(0.0), 1);
        assert_eq!(default_psf_size(0.1), 3);
        assert_eq!(default_psf_size(0.5), 5);
        assert_eq!(default_psf_size(1.0), 7);
        assert_eq!(default_psf_size(2.0), 13);
    }

    #[test]
    fn delta_and_constant_images() {
        let img = Image::new(4, 5, (0..20).map(|v| v as f32 * 0.3 - 1.0).collect()).unwrap();
        let same = convolve_psf(&img, &PsfKernel::gaussian(0.0, 3).unwrap(), PadMode::Reflect).unwrap();
        assert_eq!(same, img);

        let flat = Image::filled(9, 9, 42.0);
        let blurred = convolve_psf(&flat, &PsfKernel::gaussian(1.3, 7).unwrap(), PadMode::Reflect).unwrap();
        for v in blurred.pixels() {
            assert!((v - 42.0).abs() < 1e-4);
        }
    }

    #[test]
    fn undersized_image_rejected() {
        let img = Image::filled(4, 4, 1.0);
        assert!(convolve_psf(&img, &PsfKernel::gaussian(1.0, 7).unwrap(), PadMode::Reflect).is_err());
    }
}
