//! im2col-based "same" convolution kernels.

use super::{num_threads, Element, PadMode};

/// Maps a possibly out-of-range coordinate onto `0..len` by mirroring about
/// the border pixel. Valid for offsets smaller than `len`.
pub fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    // A single reflection suffices when |offset| < len; loop for robustness.
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Source index along one axis for every (kernel tap, output position) pair.
fn axis_map(len: usize, taps: usize, pad: PadMode) -> Vec<Option<usize>> {
    let half = (taps / 2) as isize;
    let mut map = Vec::with_capacity(taps * len);
    for t in 0..taps as isize {
        for o in 0..len as isize {
            let i = o + t - half;
            map.push(match pad {
                PadMode::Zero if i < 0 || i >= len as isize => None,
                PadMode::Zero => Some(i as usize),
                PadMode::Reflect => Some(reflect_index(i, len)),
            });
        }
    }
    map
}

pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: PadMode,
}

impl ConvGeometry {
    pub fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    /// Unfolds one `[Cin, H, W]` image into a `[Cin·kh·kw, H·W]` matrix.
    pub fn im2col<T: Element>(&self, image: &[T], cols: &mut [T]) {
        let ymap = axis_map(self.h, self.kh, self.pad);
        let xmap = axis_map(self.w, self.kw, self.pad);
        let p = self.pixels();
        let mut row = 0;
        for c in 0..self.cin {
            let plane = &image[c * p..(c + 1) * p];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let xm = &xmap[kx * self.w..(kx + 1) * self.w];
                    for y in 0..self.h {
                        let out = &mut dst[y * self.w..(y + 1) * self.w];
                        match ymap[ky * self.h + y] {
                            None => out.fill(T::zero()),
                            Some(sy) => {
                                let src = &plane[sy * self.w..(sy + 1) * self.w];
                                for (o, m) in out.iter_mut().zip(xm) {
                                    *o = match m {
                                        Some(sx) => src[*sx],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters column gradients back
    /// onto the image, accumulating where padding folded several taps onto
    /// one source pixel.
    pub fn col2im_add<T: Element>(&self, cols: &[T], image: &mut [T]) {
        let ymap = axis_map(self.h, self.kh, self.pad);
        let xmap = axis_map(self.w, self.kw, self.pad);
        let p = self.pixels();
        let mut row = 0;
        for c in 0..self.cin {
            let plane = &mut image[c * p..(c + 1) * p];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let xm = &xmap[kx * self.w..(kx + 1) * self.w];
                    for y in 0..self.h {
                        if let Some(sy) = ymap[ky * self.h + y] {
                            let g = &src[y * self.w..(y + 1) * self.w];
                            let dst = &mut plane[sy * self.w..(sy + 1) * self.w];
                            for (v, m) in g.iter().zip(xm) {
                                if let Some(sx) = m {
                                    dst[*sx] = dst[*sx] + *v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Row-major `c[m×n] (+)= a · b`, splitting the rows of `c` across the
/// configured number of threads.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_rows<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_strides: (isize, isize),
    b: &[T],
    b_strides: (isize, isize),
    c: &mut [T],
    accumulate: bool,
) {
    let threads = num_threads().min(m).max(1);
    let c_strides = (n as isize, 1);
    if threads == 1 || m * n * k < 1 << 16 {
        T::gemm(m, k, n, a, a_strides, b, b_strides, c, c_strides, accumulate);
        return;
    }
    let chunk = m.div_ceil(threads);
    std::thread::scope(|scope| {
        for (i, c_block) in c.chunks_mut(chunk * n).enumerate() {
            let row0 = i * chunk;
            let rows = c_block.len() / n;
            let a_block = &a[row0 * a_strides.0 as usize..];
            scope.spawn(move || {
                T::gemm(
                    rows, k, n, a_block, a_strides, b, b_strides, c_block, c_strides, accumulate,
                );
            });
        }
    });
}
