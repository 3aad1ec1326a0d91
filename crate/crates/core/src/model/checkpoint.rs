//! Self-describing checkpoint files.
//!
//! Layout: magic `DCKP`, `u32` version, `u32` length + UTF-8 `key=value`
//! config block, `u32` tensor count, then per tensor a `u32` length-prefixed
//! name followed by a raw `NTF1` tensor record.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{layer_specs, ModelConfig, UNetParams};
use crate::error::{Error, Result};
use crate::image::io::{decode_tensor, encode_tensor, write_atomic, ByteReader};
use crate::image::PsfKernel;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const PSF_TENSOR: &str = "psf";
const TRAIN_PREFIX: &str = "train.";

/// Trained network plus everything inference needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: UNetParams<f32>,
    pub model: ModelConfig,
    /// `key=value` lines describing the training run, kept verbatim.
    pub train_echo: String,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut config = String::new();
        let _ = writeln!(config, "base_channels={}", self.model.base_channels);
        let _ = writeln!(config, "mean={}", self.model.mean);
        let _ = writeln!(config, "std={}", self.model.std);
        match &self.model.psf {
            Some(psf) => {
                let _ = writeln!(config, "psf_sigma={}", psf.sigma());
                let _ = writeln!(config, "psf_size={}", psf.size());
            }
            None => {
                let _ = writeln!(config, "psf_sigma=none");
            }
        }
        for line in self.train_echo.lines().filter(|l| !l.trim().is_empty()) {
            let _ = writeln!(config, "{TRAIN_PREFIX}{line}");
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());

        let named: Vec<(String, &Tensor<f32>)> = self.params.named().collect();
        let count = named.len() + self.model.psf.is_some() as usize;
        out.extend_from_slice(&(count as u32).to_le_bytes());
        let mut put = |name: &str, dims: &[usize], data: &[f32]| {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor(&mut out, dims, data);
        };
        for (name, t) in &named {
            put(name, t.shape(), t.data());
        }
        if let Some(psf) = &self.model.psf {
            put(PSF_TENSOR, &[psf.size(), psf.size()], psf.weights());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MAGIC, "checkpoint")?;
        let at = r.offset();
        let version = r.u32("checkpoint version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                at,
                format!("checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"),
            ));
        }
        let len = r.u32("config length")? as usize;
        let at = r.offset();
        let text = std::str::from_utf8(r.take(len, "config block")?)
            .map_err(|_| Error::format(at, "config block is not UTF-8"))?;

        let mut fields = BTreeMap::new();
        let mut train_echo = String::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix(TRAIN_PREFIX) {
                train_echo.push_str(rest);
                train_echo.push('\n');
            } else if let Some((k, v)) = line.split_once('=') {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let field = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| Error::Config(format!("checkpoint config lacks `{k}`")))
        };
        let parse_f64 = |k: &str| -> Result<f64> {
            field(k)?
                .parse()
                .map_err(|_| Error::Config(format!("checkpoint field `{k}` is not a number")))
        };
        let base_channels: usize = field("base_channels")?
            .parse()
            .map_err(|_| Error::Config("checkpoint field `base_channels` is malformed".into()))?;
        let psf_sigma = match field("psf_sigma")?.as_str() {
            "none" => None,
            _ => Some(parse_f64("psf_sigma")?),
        };

        let mut expected: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for spec in layer_specs(base_channels) {
            let k = spec.kernel;
            expected.insert(
                format!("{}.weight", spec.name),
                vec![spec.out_channels, spec.in_channels, k, k],
            );
            expected.insert(format!("{}.bias", spec.name), vec![spec.out_channels]);
        }
        if psf_sigma.is_some() {
            let k: usize = field("psf_size")?
                .parse()
                .map_err(|_| Error::Config("checkpoint field `psf_size` is malformed".into()))?;
            expected.insert(PSF_TENSOR.to_string(), vec![k, k]);
        }

        let count = r.u32("tensor count")? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let at = r.offset();
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
                .to_string();
            let (dims, data) = decode_tensor(&mut r).map_err(|e| Error::Tensor {
                name: name.clone(),
                message: e.to_string(),
            })?;
            if let Some(want) = expected.get(&name).filter(|want| **want != dims) {
                return Err(Error::Tensor {
                    name,
                    message: format!("stored extents {dims:?}, expected {want:?}"),
                });
            }
            tensors.insert(name, (dims, data));
        }
        if r.remaining() != 0 {
            return Err(Error::format(r.offset(), format!("{} trailing bytes", r.remaining())));
        }

        let mut take = |name: String| -> Result<Tensor<f32>> {
            let (dims, data) = tensors.remove(&name).ok_or_else(|| Error::Tensor {
                name: name.clone(),
                message: "missing from checkpoint".into(),
            })?;
            Tensor::new(dims, data).map_err(|e| Error::Tensor {
                name,
                message: e.to_string(),
            })
        };
        let mut layers = Vec::new();
        for spec in layer_specs(base_channels) {
            let w = take(format!("{}.weight", spec.name))?;
            let b = take(format!("{}.bias", spec.name))?;
            layers.push((w, b));
        }
        let params = UNetParams::from_layers(base_channels, layers)?;
        let psf = match psf_sigma {
            None => None,
            Some(sigma) => {
                let k = take(PSF_TENSOR.to_string())?;
                let size = k.shape()[0];
                Some(
                    PsfKernel::from_weights(size, k.into_data(), sigma).map_err(|e| Error::Tensor {
                        name: PSF_TENSOR.into(),
                        message: e.to_string(),
                    })?,
                )
            }
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Tensor {
                name: extra.clone(),
                message: "unexpected tensor in checkpoint".into(),
            });
        }
        let model = ModelConfig {
            psf,
            mean: parse_f64("mean")?,
            std: parse_f64("std")?,
            base_channels,
        };
        model.validate()?;
        Ok(Self {
            params,
            model,
            train_echo,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint.encode())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}
