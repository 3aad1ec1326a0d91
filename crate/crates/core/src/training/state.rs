//! Resumable training state.
//!
//! Layout: magic `DTST`, `u32` version, `u32` length + config echo, `u64`
//! epoch, `f64` elapsed seconds, `u32` metric count + `(u64, f64, f64, f64)`
//! records, Adam `u64` step, parameter tensors, first and second moments,
//! then a `u8` flag and, when set, `u64` epoch + `f64` loss + tensors of the
//! best parameters. Tensors are `NTF1` records in parameter order.

use std::path::Path;

use super::{Adam, EpochRecord};
use crate::error::{Error, Result};
use crate::image::io::{decode_tensor, encode_tensor, write_atomic, ByteReader};
use crate::model::{layer_specs, UNetParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DTST";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BestSoFar {
    pub epoch: usize,
    pub val_loss: f64,
    pub params: UNetParams<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub params: UNetParams<f32>,
    pub adam: Adam<f32>,
    pub best: Option<BestSoFar>,
    pub metrics: Vec<EpochRecord>,
    pub elapsed: f64,
}

fn put_params(out: &mut Vec<u8>, p: &UNetParams<f32>) {
    for (_, t) in p.named() {
        encode_tensor(out, t.shape(), t.data());
    }
}

fn take_params(r: &mut ByteReader<'_>, base: usize) -> Result<UNetParams<f32>> {
    let mut layers = Vec::new();
    for _ in layer_specs(base) {
        let (wd, w) = decode_tensor(r)?;
        let (bd, b) = decode_tensor(r)?;
        layers.push((Tensor::new(wd, w)?, Tensor::new(bd, b)?));
    }
    UNetParams::from_layers(base, layers)
}

fn f64_at(r: &mut ByteReader<'_>, what: &str) -> Result<f64> {
    Ok(f64::from_le_bytes(r.take(8, what)?.try_into().expect("8 bytes")))
}

fn u64_at(r: &mut ByteReader<'_>, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(r.take(8, what)?.try_into().expect("8 bytes")))
}

impl TrainState {
    /// Serialises the state together with the configuration echo it belongs to.
    pub fn encode(&self, echo: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
        out.extend_from_slice(echo.as_bytes());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.elapsed.to_le_bytes());
        out.extend_from_slice(&(self.metrics.len() as u32).to_le_bytes());
        for m in &self.metrics {
            out.extend_from_slice(&(m.epoch as u64).to_le_bytes());
            for v in [m.train_loss, m.val_loss, m.wall_seconds] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.adam.step_count().to_le_bytes());
        put_params(&mut out, &self.params);
        for buf in self.adam.first_moments().iter().chain(self.adam.second_moments()) {
            encode_tensor(&mut out, &[buf.len()], buf);
        }
        match &self.best {
            None => out.push(0),
            Some(b) => {
                out.push(1);
                out.extend_from_slice(&(b.epoch as u64).to_le_bytes());
                out.extend_from_slice(&b.val_loss.to_le_bytes());
                put_params(&mut out, &b.params);
            }
        }
        out
    }

    /// Returns the state and the configuration echo stored with it.
    pub fn decode(bytes: &[u8], base_channels: usize, lr: f64) -> Result<(Self, String)> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MAGIC, "training state")?;
        let at = r.offset();
        let version = r.u32("state version")?;
        if version != VERSION {
            return Err(Error::format(
                at,
                format!("training state version {version} unsupported"),
            ));
        }
        let len = r.u32("echo length")? as usize;
        let at = r.offset();
        let echo = std::str::from_utf8(r.take(len, "config echo")?)
            .map_err(|_| Error::format(at, "config echo is not UTF-8"))?
            .to_string();
        let epoch = u64_at(&mut r, "epoch")? as usize;
        let elapsed = f64_at(&mut r, "elapsed")?;
        let n = r.u32("metric count")? as usize;
        let mut metrics = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            metrics.push(EpochRecord {
                epoch: u64_at(&mut r, "metric epoch")? as usize,
                train_loss: f64_at(&mut r, "train loss")?,
                val_loss: f64_at(&mut r, "val loss")?,
                wall_seconds: f64_at(&mut r, "wall seconds")?,
            });
        }
        let step = u64_at(&mut r, "adam step")?;
        let params = take_params(&mut r, base_channels)?;
        let count = params.named().count();
        let mut moments = Vec::with_capacity(2 * count);
        for _ in 0..2 * count {
            moments.push(decode_tensor(&mut r)?.1);
        }
        let v = moments.split_off(count);
        let adam = Adam::from_state(lr, step, moments, v)?;
        if adam
            .first_moments()
            .iter()
            .map(Vec::len)
            .ne(params.named().map(|(_, t)| t.numel()))
        {
            return Err(Error::Shape("Adam moments do not match the parameters".into()));
        }
        let best = match r.take(1, "best flag")?[0] {
            0 => None,
            _ => Some(BestSoFar {
                epoch: u64_at(&mut r, "best epoch")? as usize,
                val_loss: f64_at(&mut r, "best loss")?,
                params: take_params(&mut r, base_channels)?,
            }),
        };
        if r.remaining() != 0 {
            return Err(Error::format(r.offset(), format!("{} trailing bytes", r.remaining())));
        }
        Ok((
            Self {
                epoch,
                params,
                adam,
                best,
                metrics,
                elapsed,
            },
            echo,
        ))
    }

    pub fn save(&self, path: &Path, echo: &str) -> Result<()> {
        write_atomic(path, &self.encode(echo))
    }

    pub fn load(path: &Path, base_channels: usize, lr: f64) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, base_channels, lr)
    }
}
