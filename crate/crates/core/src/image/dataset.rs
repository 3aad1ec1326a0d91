use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::io::{load_image, save_image, write_atomic};
use super::{add_noise, convolve_psf, generate_phantoms, Image, NoiseSpec, PhantomKind, PsfKernel};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::PadMode;

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_FORMAT: &str = "deconoise-dataset-1";

/// Files of one sample, relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub noisy: String,
    pub signal: Option<String>,
    pub phantom: Option<String>,
}

/// Parameters a synthetic dataset was generated with.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationParams {
    pub kind: PhantomKind,
    pub size: usize,
    pub psf_sigma: f64,
    pub noise: NoiseSpec,
    pub seed: u64,
}

/// Index of a dataset directory: the train/validation splits and, for
/// synthetic data, how it was generated.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub dir: PathBuf,
    pub generation: Option<GenerationParams>,
    pub train: Vec<DatasetEntry>,
    pub val: Vec<DatasetEntry>,
}

fn entry_line(e: &DatasetEntry) -> String {
    format!(
        "{};{};{}",
        e.noisy,
        e.signal.as_deref().unwrap_or(""),
        e.phantom.as_deref().unwrap_or("")
    )
}

fn parse_entry(v: &str) -> Result<DatasetEntry> {
    let mut parts = v.split(';');
    let noisy = parts.next().unwrap_or("").trim();
    if noisy.is_empty() {
        return Err(Error::Config(format!("manifest entry `{v}` has no noisy file")));
    }
    let opt = |p: Option<&str>| p.map(str::trim).filter(|s| !s.is_empty()).map(String::from);
    Ok(DatasetEntry {
        noisy: noisy.to_string(),
        signal: opt(parts.next()),
        phantom: opt(parts.next()),
    })
}

impl DatasetManifest {
    /// Manifest over user-supplied noisy images without ground truth.
    pub fn from_noisy_files(dir: impl Into<PathBuf>, train: &[&str], val: &[&str]) -> Self {
        let entry = |f: &&str| DatasetEntry {
            noisy: f.to_string(),
            signal: None,
            phantom: None,
        };
        Self {
            dir: dir.into(),
            generation: None,
            train: train.iter().map(entry).collect(),
            val: val.iter().map(entry).collect(),
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("format={MANIFEST_FORMAT}\n");
        if let Some(g) = &self.generation {
            let _ = writeln!(s, "kind={}", g.kind);
            let _ = writeln!(s, "size={}", g.size);
            let _ = writeln!(s, "psf_sigma={}", g.psf_sigma);
            let _ = writeln!(s, "noise={}", g.noise);
            let _ = writeln!(s, "seed={}", g.seed);
        }
        let _ = writeln!(s, "n_train={}", self.train.len());
        let _ = writeln!(s, "n_val={}", self.val.len());
        for e in &self.train {
            let _ = writeln!(s, "train={}", entry_line(e));
        }
        for e in &self.val {
            let _ = writeln!(s, "val={}", entry_line(e));
        }
        s
    }

    pub fn parse(dir: impl Into<PathBuf>, text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("manifest line {}: expected key=value", lineno + 1)))?;
            match k.trim() {
                "train" => train.push(parse_entry(v)?),
                "val" => val.push(parse_entry(v)?),
                key => {
                    fields.insert(key.to_string(), v.trim().to_string());
                }
            }
        }
        if fields.get("format").map(String::as_str) != Some(MANIFEST_FORMAT) {
            return Err(Error::Config(format!("manifest is not `{MANIFEST_FORMAT}`")));
        }
        let num = |k: &str| -> Result<Option<String>> { Ok(fields.get(k).cloned()) };
        let bad = |k: &str| Error::Config(format!("manifest field `{k}` is malformed"));
        let generation = match num("kind")? {
            None => None,
            Some(kind) => Some(GenerationParams {
                kind: kind.parse()?,
                size: num("size")?.and_then(|v| v.parse().ok()).ok_or_else(|| bad("size"))?,
                psf_sigma: num("psf_sigma")?
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad("psf_sigma"))?,
                noise: num("noise")?.ok_or_else(|| bad("noise"))?.parse()?,
                seed: num("seed")?.and_then(|v| v.parse().ok()).ok_or_else(|| bad("seed"))?,
            }),
        };
        for (key, list) in [("n_train", &train), ("n_val", &val)] {
            if let Some(n) = fields.get(key) {
                if n.parse::<usize>().ok() != Some(list.len()) {
                    return Err(Error::Config(format!(
                        "manifest declares {key}={n} but lists {} entries",
                        list.len()
                    )));
                }
            }
        }
        Ok(Self {
            dir: dir.into(),
            generation,
            train,
            val,
        })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = Self::parse(dir, &text)?;
        manifest.check_disjoint()?;
        Ok(manifest)
    }

    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        write_atomic(&self.dir.join(MANIFEST_FILE), self.to_text().as_bytes())
    }

    fn check_disjoint(&self) -> Result<()> {
        let train: HashSet<&str> = self.train.iter().map(|e| e.noisy.as_str()).collect();
        if let Some(e) = self.val.iter().find(|e| train.contains(e.noisy.as_str())) {
            return Err(Error::Config(format!("`{}` is listed in both train and val", e.noisy)));
        }
        Ok(())
    }

    /// Checks that every listed file exists and parses.
    pub fn validate(&self) -> Result<()> {
        self.check_disjoint()?;
        for e in self.train.iter().chain(&self.val) {
            for f in std::iter::once(&e.noisy).chain(e.signal.iter()).chain(e.phantom.iter()) {
                load_image(&self.path(f))?;
            }
        }
        Ok(())
    }

    pub fn load_noisy(&self, entries: &[DatasetEntry]) -> Result<Vec<Image>> {
        entries.iter().map(|e| load_image(&self.path(&e.noisy))).collect()
    }

    pub fn train_noisy(&self) -> Result<Vec<Image>> {
        self.load_noisy(&self.train)
    }

    pub fn val_noisy(&self) -> Result<Vec<Image>> {
        self.load_noisy(&self.val)
    }
}

/// Generates phantoms, blurs them with a Gaussian PSF, adds noise and
/// writes `phantom`/`signal`/`noisy` triples plus the manifest to `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_dataset(
    kind: PhantomKind,
    n_train: usize,
    n_val: usize,
    size: usize,
    psf_sigma: f64,
    noise: NoiseSpec,
    out_dir: &Path,
    seed: u64,
) -> Result<DatasetManifest> {
    let psf = PsfKernel::gaussian_default(psf_sigma)?;
    let phantoms = generate_phantoms(kind, n_train + n_val, size, seed)?;
    let noise_base = rng::derive_seed(seed, "dataset-noise");
    let mut manifest = DatasetManifest {
        dir: out_dir.to_path_buf(),
        generation: Some(GenerationParams {
            kind,
            size,
            psf_sigma,
            noise,
            seed,
        }),
        train: Vec::new(),
        val: Vec::new(),
    };
    for split in ["train", "val"] {
        let d = out_dir.join(split);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (i, phantom) in phantoms.iter().enumerate() {
        let (split, idx) = if i < n_train {
            ("train", i)
        } else {
            ("val", i - n_train)
        };
        let signal = convolve_psf(phantom, &psf, PadMode::Reflect)?;
        let noisy = add_noise(&signal, noise, noise_base.wrapping_add(i as u64))?.image;
        let name = |what: &str| format!("{split}/{idx:04}_{what}.ntf");
        let entry = DatasetEntry {
            noisy: name("noisy"),
            signal: Some(name("signal")),
            phantom: Some(name("phantom")),
        };
        save_image(&out_dir.join(&entry.noisy), &noisy)?;
        save_image(&out_dir.join(entry.signal.as_ref().unwrap()), &signal)?;
        save_image(&out_dir.join(entry.phantom.as_ref().unwrap()), phantom)?;
        if split == "train" {
            manifest.train.push(entry);
        } else {
            manifest.val.push(entry);
        }
    }
    manifest.save()?;
    Ok(manifest)
}
