//! Raw float tensor files and 16-bit PGM export.
//!
//! Raw layout (little-endian): magic `NTF1`, `u32` rank, `u32` extents, then
//! `f32` payload in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"NTF1";

/// Bounds-checked little-endian reader that reports byte offsets on failure.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.offset(),
                format!("truncated {what}: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn expect_magic(&mut self, magic: &[u8], what: &str) -> Result<()> {
        let at = self.offset();
        let got = self.take(magic.len(), what)?;
        if got != magic {
            return Err(Error::format(
                at,
                format!(
                    "bad {what} magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        Ok(())
    }
}

/// Appends one raw tensor record to `out`.
pub fn encode_tensor(out: &mut Vec<u8>, dims: &[usize], data: &[f32]) {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Reads one raw tensor record.
pub fn decode_tensor(r: &mut ByteReader<'_>) -> Result<(Vec<usize>, Vec<f32>)> {
    r.expect_magic(RAW_MAGIC, "tensor")?;
    let rank = r.u32("tensor rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::format(r.offset() - 4, format!("implausible tensor rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32("tensor extent")? as usize);
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(r.offset(), format!("tensor extents {dims:?} overflow")))?;
    let bytes = r.take(numel * 4, "tensor payload")?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((dims, data))
}

/// Writes `bytes` to a sibling temp file and renames it into place, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let mut f = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(tmp, e))?;
    f.sync_all().map_err(|e| Error::io(tmp, e))?;
    drop(f);
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    let mut out = Vec::with_capacity(16 + image.len() * 4);
    encode_tensor(&mut out, &[image.height(), image.width()], image.pixels());
    write_atomic(path, &out)
}

/// Loads a raw image. Accepts `[H, W]` and `[1, 1, H, W]` tensors.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes);
    let (dims, data) = decode_tensor(&mut r)?;
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    match dims[..] {
        [h, w] | [1, 1, h, w] => Image::new(h, w, data),
        _ => Err(Error::Shape(format!(
            "{}: expected a 2-D image, found extents {dims:?}",
            path.display()
        ))),
    }
}

/// Binary 16-bit PGM (P5, maxval 65535) with `[min, max]` mapped linearly
/// onto `[0, 65535]`. A constant image maps to all zeros.
pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let (lo, hi) = image.min_max();
    let range = hi as f64 - lo as f64;
    let mut out = format!("P5\n{} {}\n65535\n", image.width(), image.height()).into_bytes();
    for &v in image.pixels() {
        let level = if range > 0.0 {
            ((v as f64 - lo as f64) / range * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}

pub fn save_pgm(path: &Path, image: &Image) -> Result<()> {
    write_atomic(path, &encode_pgm(image))
}

/// Places images side by side with a one-pixel dark gutter; each panel is
/// rescaled to its own range first.
pub fn montage(panels: &[&Image]) -> Result<Image> {
    let h = panels.iter().map(|p| p.height()).max().unwrap_or(1);
    let w: usize = panels.iter().map(|p| p.width()).sum::<usize>() + panels.len().saturating_sub(1);
    let mut canvas = Image::filled(h, w.max(1), 0.0);
    let mut x0 = 0;
    for p in panels {
        let (lo, hi) = p.min_max();
        let range = (hi - lo).max(f32::MIN_POSITIVE);
        for r in 0..p.height() {
            for c in 0..p.width() {
                canvas.set(r, x0 + c, (p.get(r, c) - lo) / range);
            }
        }
        x0 += p.width() + 1;
    }
    Ok(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let img = Image::filled(128, 128, 0.5);
        let mut out = Vec::new();
        encode_tensor(&mut out, &[img.height(), img.width()], img.pixels());
        assert_eq!(&out[..4], b"NTF1");
        assert_eq!(&out[4..8], &2u32.to_le_bytes());
        assert_eq!(&out[8..12], &128u32.to_le_bytes());
        assert_eq!(&out[12..16], &128u32.to_le_bytes());
        assert_eq!(out.len(), 16 + 128 * 128 * 4);
    }

    #[test]
    fn truncated_and_bad_magic_report_offsets() {
        let mut out = Vec::new();
        encode_tensor(&mut out, &[2, 3], &[1.0; 6]);
        let cut = &out[..out.len() - 3];
        let err = decode_tensor(&mut ByteReader::new(cut)).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 16, .. }), "{err}");

        out[0] = b'X';
        let err = decode_tensor(&mut ByteReader::new(&out)).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn constant_pgm_is_black() {
        let pgm = encode_pgm(&Image::filled(3, 2, 7.0));
        let header = b"P5\n2 3\n65535\n";
        assert_eq!(&pgm[..header.len()], header);
        assert!(pgm[header.len()..].iter().all(|&b| b == 0));
        assert_eq!(pgm.len(), header.len() + 12);
    }

    #[test]
    fn pgm_maps_range_linearly() {
        let img = Image::new(1, 3, vec![-1.0, 0.0, 1.0]).unwrap();
        let pgm = encode_pgm(&img);
        let body = &pgm[pgm.len() - 6..];
        assert_eq!(body, &[0, 0, 0x80, 0x00, 0xff, 0xff]);
    }
}
