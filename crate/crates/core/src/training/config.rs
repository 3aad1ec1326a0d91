use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{DEFAULT_BASE_CHANNELS, SIZE_MULTIPLE};

/// Complete hyperparameter record of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Adam updates per epoch.
    pub steps_per_epoch: usize,
    /// Patches per forward pass. Only 1 is supported; use `virtual_batch`.
    pub batch: usize,
    /// Single-patch gradients averaged into each Adam update.
    pub virtual_batch: usize,
    pub patch: usize,
    pub mask_rate: f64,
    pub lambda_pos: f64,
    /// Gaussian PSF width of the final layer; `None` drops the layer.
    pub psf_sigma: Option<f64>,
    pub seed: u64,
    pub mask_neighborhood: usize,
    pub base_channels: usize,
    /// Fixed masked patches scored after every epoch.
    pub val_patches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            epochs: 200,
            steps_per_epoch: 10,
            batch: 1,
            virtual_batch: 20,
            patch: 96,
            mask_rate: 0.03125,
            lambda_pos: 1.0,
            psf_sigma: Some(1.0),
            seed: 0,
            mask_neighborhood: 5,
            base_channels: DEFAULT_BASE_CHANNELS,
            val_patches: 20,
        }
    }
}

const KEYS: [&str; 13] = [
    "lr",
    "epochs",
    "steps_per_epoch",
    "batch",
    "virtual_batch",
    "patch",
    "mask_rate",
    "lambda",
    "psf_sigma",
    "seed",
    "mask_neighborhood",
    "base_channels",
    "val_patches",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.steps_per_epoch == 0 || self.virtual_batch == 0 || self.val_patches == 0 {
            return bad("steps_per_epoch, virtual_batch and val_patches must be positive".into());
        }
        if self.batch != 1 {
            return bad(format!(
                "batch {} is unsupported; accumulate with virtual_batch instead",
                self.batch
            ));
        }
        if self.patch == 0 || !self.patch.is_multiple_of(SIZE_MULTIPLE) {
            return bad(format!(
                "patch {} must be a positive multiple of {SIZE_MULTIPLE}",
                self.patch
            ));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 0.5) {
            return bad(format!("mask_rate {} must lie in (0, 0.5]", self.mask_rate));
        }
        if !(self.lambda_pos >= 0.0 && self.lambda_pos.is_finite()) {
            return bad(format!("lambda {} must be non-negative", self.lambda_pos));
        }
        if let Some(s) = self.psf_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("psf_sigma {s} must be non-negative"));
            }
        }
        if self.mask_neighborhood < 3 || self.mask_neighborhood.is_multiple_of(2) {
            return bad(format!(
                "mask_neighborhood {} must be odd and at least 3",
                self.mask_neighborhood
            ));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        Ok(())
    }

    /// `key=value` lines in a fixed order, one per field.
    pub fn to_echo(&self) -> String {
        let mut s = String::new();
        let psf = self.psf_sigma.map_or("none".to_string(), |v| v.to_string());
        let values = [
            self.lr.to_string(),
            self.epochs.to_string(),
            self.steps_per_epoch.to_string(),
            self.batch.to_string(),
            self.virtual_batch.to_string(),
            self.patch.to_string(),
            self.mask_rate.to_string(),
            self.lambda_pos.to_string(),
            psf,
            self.seed.to_string(),
            self.mask_neighborhood.to_string(),
            self.base_channels.to_string(),
            self.val_patches.to_string(),
        ];
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Inverse of [`to_echo`](Self::to_echo). Every key must be present once.
    pub fn from_echo(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", n + 1)));
            }
            if map.insert(k, v).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        fn get<T: std::str::FromStr>(map: &BTreeMap<&str, &str>, k: &str) -> Result<T> {
            let v = map.get(k).ok_or_else(|| Error::Config(format!("missing key `{k}`")))?;
            v.parse()
                .map_err(|_| Error::Config(format!("key `{k}` has malformed value `{v}`")))
        }
        let psf_sigma = match map.get("psf_sigma") {
            Some(&"none") => None,
            _ => Some(get(&map, "psf_sigma")?),
        };
        let cfg = Self {
            lr: get(&map, "lr")?,
            epochs: get(&map, "epochs")?,
            steps_per_epoch: get(&map, "steps_per_epoch")?,
            batch: get(&map, "batch")?,
            virtual_batch: get(&map, "virtual_batch")?,
            patch: get(&map, "patch")?,
            mask_rate: get(&map, "mask_rate")?,
            lambda_pos: get(&map, "lambda")?,
            psf_sigma,
            seed: get(&map, "seed")?,
            mask_neighborhood: get(&map, "mask_neighborhood")?,
            base_channels: get(&map, "base_channels")?,
            val_patches: get(&map, "val_patches")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
