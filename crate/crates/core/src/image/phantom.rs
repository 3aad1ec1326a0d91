use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Image;
use crate::error::{Error, Result};
use crate::rng;

const FOREGROUND: f32 = 255.0;
const MIN_SIZE: usize = 64;

/// Procedural phantom families with structure finer than a typical PSF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhantomKind {
    /// Sparse hard disks of radius 1–3 px.
    Blobs,
    /// Random one-pixel-wide polylines.
    Strokes,
    /// Lines of small glyphs built from strokes, resembling rendered text.
    TextLike,
}

impl fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhantomKind::Blobs => "blobs",
            PhantomKind::Strokes => "strokes",
            PhantomKind::TextLike => "text_like",
        })
    }
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(PhantomKind::Blobs),
            "strokes" => Ok(PhantomKind::Strokes),
            "text_like" => Ok(PhantomKind::TextLike),
            _ => Err(Error::InvalidArgument(format!(
                "phantom kind `{s}` is not blobs, strokes or text_like"
            ))),
        }
    }
}

/// Generates `n` square phantoms; image `i` uses sub-stream `i` of `seed`.
pub fn generate_phantoms(kind: PhantomKind, n: usize, size: usize, seed: u64) -> Result<Vec<Image>> {
    if size < MIN_SIZE {
        return Err(Error::InvalidArgument(format!(
            "phantom size {size} is below the minimum of {MIN_SIZE}"
        )));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = rng::substream(seed, "phantom", i as u64);
            let mut canvas = Canvas::new(size);
            match kind {
                PhantomKind::Blobs => canvas.blobs(&mut rng),
                PhantomKind::Strokes => canvas.strokes(&mut rng),
                PhantomKind::TextLike => canvas.text(&mut rng),
            }
            canvas.into_image()
        })
        .collect())
}

struct Canvas {
    size: usize,
    px: Vec<f32>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self {
            size,
            px: vec![0.0; size * size],
        }
    }

    fn into_image(self) -> Image {
        Image::new(self.size, self.size, self.px).expect("canvas is square and finite")
    }

    fn plot(&mut self, y: isize, x: isize) {
        let n = self.size as isize;
        if (0..n).contains(&y) && (0..n).contains(&x) {
            self.px[y as usize * self.size + x as usize] = FOREGROUND;
        }
    }

    fn rect(&mut self, y: isize, x: isize, h: isize, w: isize) {
        for dy in 0..h {
            for dx in 0..w {
                self.plot(y + dy, x + dx);
            }
        }
    }

    /// Bresenham line between two points, inclusive.
    fn line(&mut self, (y0, x0): (isize, isize), (y1, x1): (isize, isize)) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = ((x1 - x0).signum(), (y1 - y0).signum());
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.plot(y, x);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn blobs(&mut self, rng: &mut ChaCha8Rng) {
        let n = self.size as isize;
        // ~5 % coverage at the mean disk area of ~16 px
        let count = self.size * self.size / 300;
        for _ in 0..count {
            let r: isize = rng.gen_range(1..=3);
            let (cy, cx) = (rng.gen_range(0..n), rng.gen_range(0..n));
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy * dy + dx * dx <= r * r {
                        self.plot(cy + dy, cx + dx);
                    }
                }
            }
        }
    }

    fn strokes(&mut self, rng: &mut ChaCha8Rng) {
        let n = self.size as isize;
        for _ in 0..self.size / 8 {
            let mut p = (rng.gen_range(0..n), rng.gen_range(0..n));
            for _ in 0..rng.gen_range(2..=5) {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let len = rng.gen_range(8.0..30.0);
                let q = (
                    p.0 + (angle.sin() * len).round() as isize,
                    p.1 + (angle.cos() * len).round() as isize,
                );
                self.line(p, q);
                p = q;
            }
        }
    }

    fn text(&mut self, rng: &mut ChaCha8Rng) {
        let n = self.size as isize;
        let line_height: isize = rng.gen_range(10..=13);
        let glyph_h: isize = rng.gen_range(6..=8);
        let mut top = rng.gen_range(1..line_height);
        while top + glyph_h < n {
            let mut left = rng.gen_range(-4..4);
            while left < n {
                let word_len = rng.gen_range(1..=7);
                for _ in 0..word_len {
                    let glyph_w: isize = rng.gen_range(4..=6);
                    self.glyph(rng, top, left, glyph_h, glyph_w);
                    left += glyph_w + 1;
                }
                left += rng.gen_range(3..=5);
            }
            top += line_height;
        }
    }

    /// A small glyph composed of 2–4 stems, bars, diagonals or dots.
    fn glyph(&mut self, rng: &mut ChaCha8Rng, y: isize, x: isize, h: isize, w: isize) {
        let mid = y + h / 2;
        let strokes = rng.gen_range(2..=4);
        for _ in 0..strokes {
            match rng.gen_range(0..8) {
                0 => self.rect(y, x, h, 1),
                1 => self.rect(y, x + w - 1, h, 1),
                2 => self.rect(y, x, 1, w),
                3 => self.rect(mid, x, 1, w),
                4 => self.rect(y + h - 1, x, 1, w),
                5 => self.line((y, x), (y + h - 1, x + w - 1)),
                6 => self.line((y + h - 1, x), (y, x + w - 1)),
                _ => {
                    // ascender or descender stem
                    let (top, len) = if rng.gen_bool(0.5) { (y - 3, h + 3) } else { (y, h + 3) };
                    self.rect(top, x + rng.gen_range(0..w), len, 1)
                }
            }
        }
    }
}
