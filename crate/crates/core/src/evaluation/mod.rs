//! Metrics, inference, the PSF-convolved blind-spot baseline and the three
//! experiment runners (method comparison, positivity ablation, PSF sweep).

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::image::io::{montage, save_pgm, write_atomic};
use crate::image::{convolve_psf, io::load_image, DatasetManifest, Image, PsfKernel};
use crate::model::{forward, Checkpoint, SIZE_MULTIPLE};
use crate::tensor::{reflect_index, PadMode};
use crate::training::{model_config, train, TrainConfig, TrainingData};

/// Header of every experiment CSV.
pub const CSV_HEADER: &str = "experiment,method,psf_sigma,seed,psnr_db,negative_fraction,wall_seconds";

/// Peak signal-to-noise ratio in dB with the peak taken as the ground
/// truth's `max − min`. Identical images give `+inf`.
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let (lo, hi) = gt.min_max();
    let range = hi as f64 - lo as f64;
    if range <= 0.0 {
        return Err(Error::InvalidArgument("ground truth has zero dynamic range".into()));
    }
    let mse = pred
        .pixels()
        .iter()
        .zip(gt.pixels())
        .map(|(&p, &g)| (p as f64 - g as f64).powi(2))
        .sum::<f64>()
        / gt.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

/// Share of pixels below zero.
pub fn negative_fraction(img: &Image) -> f64 {
    img.pixels().iter().filter(|&&v| v < 0.0).count() as f64 / img.len() as f64
}

fn reflect_pad(img: &Image, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
    if top >= img.height()
        || h - img.height() - top >= img.height()
        || left >= img.width()
        || w - img.width() - left >= img.width()
    {
        return Err(Error::Shape(format!(
            "{}x{} image is too small to mirror-pad to {h}x{w}",
            img.height(),
            img.width()
        )));
    }
    let mut px = Vec::with_capacity(h * w);
    for r in 0..h {
        let sr = reflect_index(r as isize - top as isize, img.height());
        for c in 0..w {
            px.push(img.get(sr, reflect_index(c as isize - left as isize, img.width())));
        }
    }
    Image::new(h, w, px)
}

/// Full-image inference without masking. Returns `(ŝ, ẑ)`.
///
/// Extents that are not multiples of 8 are mirror-padded around the image
/// (the extra pixel of an odd margin goes to the bottom/right) and cropped back.
pub fn denoise(checkpoint: &Checkpoint, image: &Image) -> Result<(Image, Image)> {
    let round = |n: usize| n.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
    let (h, w) = (image.height(), image.width());
    let (ph, pw) = (round(h), round(w));
    let (top, left) = ((ph - h) / 2, (pw - w) / 2);
    let input = if (ph, pw) == (h, w) {
        image.clone()
    } else {
        reflect_pad(image, top, left, ph, pw)?
    };
    let fwd = forward(&input.to_tensor::<f32>(), &checkpoint.params, &checkpoint.model)?;
    let s = Image::from_tensor(fwd.tape.value(fwd.s_hat))?;
    let z = Image::from_tensor(fwd.tape.value(fwd.z_hat))?;
    if (ph, pw) == (h, w) {
        Ok((s, z))
    } else {
        Ok((s.crop(top, left, h, w)?, z.crop(top, left, h, w)?))
    }
}

/// Blind-spot output blurred with `psf` afterwards. The checkpoint must not
/// carry a PSF layer of its own.
pub fn baseline_n2v_conv(checkpoint: &Checkpoint, psf: &PsfKernel, image: &Image) -> Result<Image> {
    if checkpoint.model.psf.is_some() {
        return Err(Error::InvalidArgument(
            "checkpoint already convolves with a PSF; convolving again would blur twice".into(),
        ));
    }
    let (s, _) = denoise(checkpoint, image)?;
    convolve_psf(&s, psf, PadMode::Reflect)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Ours,
    OursNoPos,
    N2v,
    N2vConv,
    NoisyInput,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ours => "ours",
            Method::OursNoPos => "ours_no_pos",
            Method::N2v => "n2v",
            Method::N2vConv => "n2v_conv",
            Method::NoisyInput => "noisy_input",
        })
    }
}

/// One CSV row: a method's scores for one seed, averaged over the test images.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub experiment: String,
    pub method: Method,
    pub psf_sigma: Option<f64>,
    pub seed: u64,
    pub psnr_db: f64,
    pub negative_fraction: f64,
    pub wall_seconds: f64,
}

impl MetricsRecord {
    pub fn csv_line(&self) -> String {
        let sigma = self.psf_sigma.map_or("none".into(), |s| s.to_string());
        let psnr = if self.psnr_db.is_infinite() {
            "inf".to_string()
        } else {
            format!("{:.6}", self.psnr_db)
        };
        format!(
            "{},{},{},{},{},{:.6},{:.3}",
            self.experiment, self.method, sigma, self.seed, psnr, self.negative_fraction, self.wall_seconds
        )
    }
}

pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in records {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

pub fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    write_atomic(path, to_csv(records).as_bytes())
}

/// Mean scores of one (experiment, method, PSF) group over its seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub experiment: String,
    pub method: Method,
    pub psf_sigma: Option<f64>,
    pub mean_psnr_db: f64,
    pub mean_negative_fraction: f64,
    pub seeds: usize,
}

/// Groups rows by (experiment, method, PSF) in first-seen order.
pub fn summarize(records: &[MetricsRecord]) -> Vec<Summary> {
    let mut out: Vec<Summary> = Vec::new();
    for r in records {
        let key = |s: &Summary| {
            s.experiment == r.experiment
                && s.method == r.method
                && s.psf_sigma.map(f64::to_bits) == r.psf_sigma.map(f64::to_bits)
        };
        match out.iter_mut().find(|s| key(s)) {
            Some(s) => {
                s.mean_psnr_db += r.psnr_db;
                s.mean_negative_fraction += r.negative_fraction;
                s.seeds += 1;
            }
            None => out.push(Summary {
                experiment: r.experiment.clone(),
                method: r.method,
                psf_sigma: r.psf_sigma,
                mean_psnr_db: r.psnr_db,
                mean_negative_fraction: r.negative_fraction,
                seeds: 1,
            }),
        }
    }
    for s in &mut out {
        s.mean_psnr_db /= s.seeds as f64;
        s.mean_negative_fraction /= s.seeds as f64;
    }
    out
}

/// A held-out noisy image with its noise-free signal.
#[derive(Debug, Clone)]
pub struct TestImage {
    pub name: String,
    pub noisy: Image,
    pub truth: Image,
}

/// Validation images that come with a ground-truth signal.
pub fn load_test_set(manifest: &DatasetManifest) -> Result<Vec<TestImage>> {
    let set = manifest
        .val
        .iter()
        .filter_map(|e| e.signal.as_ref().map(|s| (e, s)))
        .map(|(e, s)| {
            Ok(TestImage {
                name: e.noisy.clone(),
                noisy: load_image(&manifest.path(&e.noisy))?,
                truth: load_image(&manifest.path(s))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if set.is_empty() {
        return Err(Error::InvalidArgument(
            "the validation split has no ground-truth signals to score against".into(),
        ));
    }
    Ok(set)
}

/// Identifies one training run: PSF width (`None` = no PSF layer), λ, seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RunKey {
    psf_bits: Option<u64>,
    lambda_bits: u64,
    pub seed: u64,
}

impl RunKey {
    pub fn new(psf_sigma: Option<f64>, lambda: f64, seed: u64) -> Self {
        Self {
            psf_bits: psf_sigma.map(f64::to_bits),
            lambda_bits: lambda.to_bits(),
            seed,
        }
    }

    pub fn psf_sigma(&self) -> Option<f64> {
        self.psf_bits.map(f64::from_bits)
    }

    pub fn lambda(&self) -> f64 {
        f64::from_bits(self.lambda_bits)
    }
}

type Progress = Box<dyn FnMut(&str)>;

/// Trains and scores models for the experiments, reusing a trained model
/// whenever the same run is requested again.
pub struct ExperimentRunner {
    data: TrainingData,
    test: Vec<TestImage>,
    template: TrainConfig,
    /// Width of the PSF the data was generated with.
    true_sigma: f64,
    cache: HashMap<RunKey, (Checkpoint, f64)>,
    log: Vec<RunKey>,
    montage_dir: Option<PathBuf>,
    progress: Option<Progress>,
}

impl ExperimentRunner {
    /// `template` supplies every hyperparameter except PSF, λ and seed.
    pub fn new(manifest: &DatasetManifest, template: TrainConfig) -> Result<Self> {
        let true_sigma = manifest
            .generation
            .as_ref()
            .map(|g| g.psf_sigma)
            .or(template.psf_sigma)
            .unwrap_or(1.0);
        Ok(Self::from_parts(
            TrainingData::load(manifest)?,
            load_test_set(manifest)?,
            template,
            true_sigma,
        ))
    }

    pub fn from_parts(data: TrainingData, test: Vec<TestImage>, template: TrainConfig, true_sigma: f64) -> Self {
        Self {
            data,
            test,
            template,
            true_sigma,
            cache: HashMap::new(),
            log: Vec::new(),
            montage_dir: None,
            progress: None,
        }
    }

    /// Writes `noisy | ŝ | ẑ | truth` montages of the first comparison seed.
    pub fn with_montage_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.montage_dir = Some(dir.into());
        self
    }

    /// Receives one line per finished training run.
    pub fn with_progress(mut self, f: impl FnMut(&str) + 'static) -> Self {
        self.progress = Some(Box::new(f));
        self
    }

    pub fn true_sigma(&self) -> f64 {
        self.true_sigma
    }

    pub fn test_images(&self) -> &[TestImage] {
        &self.test
    }

    /// Training runs performed so far, in order.
    pub fn training_log(&self) -> &[RunKey] {
        &self.log
    }

    /// Best-validation checkpoint of a run and its training time in seconds.
    pub fn trained(&mut self, key: RunKey) -> Result<(&Checkpoint, f64)> {
        if !self.cache.contains_key(&key) {
            let cfg = TrainConfig {
                psf_sigma: key.psf_sigma(),
                lambda_pos: key.lambda(),
                seed: key.seed,
                ..self.template.clone()
            };
            let model = model_config(&cfg, &self.data)?;
            let start = Instant::now();
            let outcome = train(&self.data, &cfg, &model, |_, _| Ok(()))?;
            let secs = start.elapsed().as_secs_f64();
            if let Some(f) = &mut self.progress {
                let sigma = key.psf_sigma().map_or("none".into(), |s| s.to_string());
                f(&format!(
                    "trained psf_sigma={sigma} lambda={} seed={} in {secs:.1}s",
                    key.lambda(),
                    key.seed
                ));
            }
            self.log.push(key);
            self.cache.insert(key, (outcome.best, secs));
        }
        let (ck, secs) = &self.cache[&key];
        Ok((ck, *secs))
    }

    #[allow(clippy::too_many_arguments)]
    fn score(
        &self,
        experiment: &str,
        method: Method,
        psf_sigma: Option<f64>,
        seed: u64,
        started: Instant,
        extra_seconds: f64,
        mut predict: impl FnMut(&TestImage) -> Result<(Image, Image)>,
    ) -> Result<MetricsRecord> {
        let mut p = 0.0;
        let mut neg = 0.0;
        for t in &self.test {
            let (s, z) = predict(t)?;
            p += psnr(&s, &t.truth)?;
            neg += negative_fraction(&z);
        }
        let n = self.test.len() as f64;
        Ok(MetricsRecord {
            experiment: experiment.to_string(),
            method,
            psf_sigma,
            seed,
            psnr_db: p / n,
            negative_fraction: neg / n,
            wall_seconds: extra_seconds + started.elapsed().as_secs_f64(),
        })
    }

    /// Scores `method` for one seed. `psf_sigma` applies to [`Method::Ours`]
    /// and [`Method::OursNoPos`]; the other methods ignore it.
    pub fn evaluate(&mut self, experiment: &str, method: Method, psf_sigma: f64, seed: u64) -> Result<MetricsRecord> {
        let key = match method {
            Method::Ours => Some(RunKey::new(Some(psf_sigma), 1.0, seed)),
            Method::OursNoPos => Some(RunKey::new(Some(psf_sigma), 0.0, seed)),
            Method::N2v | Method::N2vConv => Some(RunKey::new(None, 0.0, seed)),
            Method::NoisyInput => None,
        };
        let Some(key) = key else {
            return self.score(experiment, method, None, seed, Instant::now(), 0.0, |t| {
                Ok((t.noisy.clone(), t.noisy.clone()))
            });
        };
        let (ck, secs) = self.trained(key)?;
        let ck = ck.clone();
        let started = Instant::now();
        match method {
            Method::N2vConv => {
                let psf = PsfKernel::gaussian_default(self.true_sigma)?;
                self.score(experiment, method, Some(self.true_sigma), seed, started, secs, |t| {
                    let s = baseline_n2v_conv(&ck, &psf, &t.noisy)?;
                    Ok((s.clone(), s))
                })
            }
            Method::N2v => self.score(experiment, method, None, seed, started, secs, |t| {
                denoise(&ck, &t.noisy)
            }),
            _ => self.score(experiment, method, Some(psf_sigma), seed, started, secs, |t| {
                denoise(&ck, &t.noisy)
            }),
        }
    }

    fn write_montages(&mut self, seed: u64) -> Result<()> {
        let Some(dir) = self.montage_dir.clone() else {
            return Ok(());
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (ck, _) = self.trained(RunKey::new(Some(self.true_sigma), 1.0, seed))?;
        let ck = ck.clone();
        for (i, t) in self.test.iter().enumerate() {
            let (s, z) = denoise(&ck, &t.noisy)?;
            let m = montage(&[&t.noisy, &s, &z, &t.truth])?;
            save_pgm(&dir.join(format!("montage_{i:04}.pgm")), &m)?;
        }
        Ok(())
    }

    /// Rows for each of `methods` and `seeds`, seeds outermost.
    pub fn run_methods(&mut self, experiment: &str, methods: &[Method], seeds: &[u64]) -> Result<Vec<MetricsRecord>> {
        let mut rows = Vec::new();
        for &seed in seeds {
            for &m in methods {
                rows.push(self.evaluate(experiment, m, self.true_sigma, seed)?);
            }
        }
        Ok(rows)
    }

    /// All methods against each other at the true PSF.
    pub fn run_comparison(&mut self, seeds: &[u64]) -> Result<Vec<MetricsRecord>> {
        let rows = self.run_methods(
            "comparison",
            &[
                Method::NoisyInput,
                Method::Ours,
                Method::OursNoPos,
                Method::N2v,
                Method::N2vConv,
            ],
            seeds,
        )?;
        if let Some(&first) = seeds.first() {
            self.write_montages(first)?;
        }
        Ok(rows)
    }

    /// The PSF model with and without the positivity penalty.
    pub fn run_positivity_ablation(&mut self, seeds: &[u64]) -> Result<Vec<MetricsRecord>> {
        self.run_methods("positivity_ablation", &[Method::Ours, Method::OursNoPos], seeds)
    }

    /// The PSF model trained with each assumed PSF width.
    pub fn run_psf_sweep(&mut self, sigmas: &[f64], seeds: &[u64]) -> Result<Vec<MetricsRecord>> {
        let mut rows = Vec::new();
        for &seed in seeds {
            for &sigma in sigmas {
                rows.push(self.evaluate("psf_sweep", Method::Ours, sigma, seed)?);
            }
        }
        Ok(rows)
    }
}
