use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;

/// A masked training patch.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBatch {
    /// Network input: the patch with every masked pixel replaced.
    pub patch: Image,
    /// Original noisy values at `coords`.
    pub targets: Vec<f32>,
    /// Masked `(row, col)` positions, ascending in row-major order.
    pub coords: Vec<(usize, usize)>,
    /// Values written at `coords`.
    pub replacement_values: Vec<f32>,
    /// Where each replacement was read from; never equal to its coordinate.
    pub sources: Vec<(usize, usize)>,
}

impl MaskBatch {
    /// Flat row-major indices of the masked pixels.
    pub fn flat_indices(&self) -> Vec<usize> {
        let w = self.patch.width();
        self.coords.iter().map(|&(r, c)| r * w + c).collect()
    }
}

/// Number of masked pixels for a patch area, `floor(rate · area)`.
pub fn mask_count(rate: f64, area: usize) -> usize {
    (rate * area as f64).floor() as usize
}

/// Uniformly random image from `pool` and uniformly random window in it.
pub fn sample_patch<R: Rng>(pool: &[Image], patch: usize, rng: &mut R) -> Result<Image> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot sample patches from an empty image pool".into(),
        ));
    }
    let img = &pool[rng.gen_range(0..pool.len())];
    if img.height() < patch || img.width() < patch {
        return Err(Error::InvalidArgument(format!(
            "{}x{} image is smaller than the {patch}x{patch} patch",
            img.height(),
            img.width()
        )));
    }
    let row = rng.gen_range(0..=img.height() - patch);
    let col = rng.gen_range(0..=img.width() - patch);
    img.crop(row, col, patch, patch)
}

/// Blind-spot masking: replaces `floor(rate · area)` distinct random pixels
/// with a value drawn uniformly from their `neighborhood × neighborhood`
/// window (clipped to the patch), never from the pixel itself.
pub fn apply_mask<R: Rng>(patch: &Image, rate: f64, neighborhood: usize, rng: &mut R) -> Result<MaskBatch> {
    if neighborhood < 3 || neighborhood.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "mask neighbourhood {neighborhood} must be odd and at least 3"
        )));
    }
    if !(rate > 0.0 && rate <= 0.5) {
        return Err(Error::InvalidArgument(format!("mask rate {rate} must lie in (0, 0.5]")));
    }
    let (h, w) = (patch.height(), patch.width());
    if h * w < 2 {
        return Err(Error::InvalidArgument(
            "a 1-pixel patch has no neighbours to sample".into(),
        ));
    }
    let n = mask_count(rate, h * w);
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "mask rate {rate} selects no pixels in a {h}x{w} patch"
        )));
    }
    let mut flat = index::sample(rng, h * w, n).into_vec();
    flat.sort_unstable();

    let half = neighborhood / 2;
    let mut masked = patch.clone();
    let mut batch = MaskBatch {
        patch: Image::filled(1, 1, 0.0),
        targets: Vec::with_capacity(n),
        coords: Vec::with_capacity(n),
        replacement_values: Vec::with_capacity(n),
        sources: Vec::with_capacity(n),
    };
    for i in flat {
        let (r, c) = (i / w, i % w);
        let (r0, r1) = (r.saturating_sub(half), (r + half).min(h - 1));
        let (c0, c1) = (c.saturating_sub(half), (c + half).min(w - 1));
        let ww = c1 - c0 + 1;
        let cells = (r1 - r0 + 1) * ww;
        let centre = (r - r0) * ww + (c - c0);
        let mut pick = rng.gen_range(0..cells - 1);
        if pick >= centre {
            pick += 1;
        }
        let src = (r0 + pick / ww, c0 + pick % ww);
        let value = patch.get(src.0, src.1);
        masked.set(r, c, value);
        batch.targets.push(patch.get(r, c));
        batch.coords.push((r, c));
        batch.replacement_values.push(value);
        batch.sources.push(src);
    }
    batch.patch = masked;
    Ok(batch)
}
