//! The `deconoise` command line: dataset generation, training, inference and
//! the experiment runners.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::evaluation::{
    baseline_n2v_conv, denoise, load_test_set, negative_fraction, psnr, summarize, write_csv, ExperimentRunner, Method,
    MetricsRecord,
};
use crate::image::io::{load_image, montage, save_image, save_pgm, write_atomic};
use crate::image::{synthesize_dataset, DatasetManifest, NoiseSpec, PhantomKind, PsfKernel};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::tensor::set_num_threads;
use crate::training::{model_config, TrainConfig, TrainState, Trainer, TrainingData, METRICS_HEADER};

/// Environment fallback for `--threads`.
pub const THREADS_ENV: &str = "DECONOISE_THREADS";

pub const CONFIG_FILE: &str = "config.txt";
pub const DATA_ECHO_FILE: &str = "data_manifest.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STATE_FILE: &str = "state.bin";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Debug, Parser)]
#[command(
    name = "deconoise",
    version,
    about = "Self-supervised denoising with a PSF-convolution output layer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesise a phantom/signal/noisy dataset.
    Generate(GenerateArgs),
    /// Train a network on a dataset directory.
    Train(TrainArgs),
    /// Run a trained network on one image.
    Denoise(DenoiseArgs),
    /// Score a prediction, or a finished run on a dataset's validation split.
    Evaluate(EvaluateArgs),
    /// Compare all methods over several seeds.
    Compare(CompareArgs),
    /// Train with a range of assumed PSF widths.
    SweepPsf(SweepArgs),
    /// Train with and without the positivity penalty.
    AblatePositivity(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "text_like")]
    pub kind: PhantomKind,
    #[arg(long, default_value_t = 200)]
    pub n_train: usize,
    #[arg(long, default_value_t = 20)]
    pub n_val: usize,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub psf_sigma: f64,
    #[arg(long, default_value = "gauss:100")]
    pub noise: NoiseSpec,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// A PSF width or `none`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsfSigma(pub Option<f64>);

impl FromStr for PsfSigma {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "none" {
            return Ok(Self(None));
        }
        match s.parse::<f64>() {
            Ok(v) if v >= 0.0 && v.is_finite() => Ok(Self(Some(v))),
            _ => Err(format!("`{s}` is neither a non-negative number nor `none`")),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "1")]
    pub psf_sigma: PsfSigma,
    #[arg(long = "lambda", default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// Adam updates per epoch.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 20)]
    pub virtual_batch: usize,
    #[arg(long, default_value_t = 96)]
    pub patch: usize,
    #[arg(long, default_value_t = 0.03125)]
    pub mask_rate: f64,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for convolutions; falls back to DECONOISE_THREADS, then 1.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value_t = crate::model::DEFAULT_BASE_CHANNELS)]
    pub base_channels: usize,
    #[arg(long, default_value_t = 20)]
    pub val_patches: usize,
    /// Continue the run stored in --out; its configuration must match.
    #[arg(long)]
    pub resume: bool,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            steps_per_epoch: self.steps,
            batch: 1,
            virtual_batch: self.virtual_batch,
            patch: self.patch,
            mask_rate: self.mask_rate,
            lambda_pos: self.lambda,
            psf_sigma: self.psf_sigma.0,
            seed: self.seed,
            mask_neighborhood: 5,
            base_channels: self.base_channels,
            val_patches: self.val_patches,
        }
    }
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out_denoised: PathBuf,
    #[arg(long)]
    pub out_deconv: PathBuf,
    /// Write 16-bit PGM files instead of raw tensors.
    #[arg(long)]
    pub pgm: bool,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, requires = "gt", conflicts_with_all = ["run", "data"])]
    pub pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    pub gt: Option<PathBuf>,
    #[arg(long, requires = "data", required_unless_present = "pred")]
    pub run: Option<PathBuf>,
    #[arg(long, requires = "run")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Training hyperparameters shared by the experiment commands. Unset
/// values take the training defaults.
#[derive(Debug, Args, Default)]
pub struct ExperimentTraining {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub virtual_batch: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub val_patches: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
}

impl ExperimentTraining {
    pub fn template(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            steps_per_epoch: self.steps.unwrap_or(d.steps_per_epoch),
            virtual_batch: self.virtual_batch.unwrap_or(d.virtual_batch),
            patch: self.patch.unwrap_or(d.patch),
            mask_rate: self.mask_rate.unwrap_or(d.mask_rate),
            lr: self.lr.unwrap_or(d.lr),
            base_channels: self.base_channels.unwrap_or(d.base_channels),
            val_patches: self.val_patches.unwrap_or(d.val_patches),
            ..d
        }
    }
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for noisy | denoised | deconvolved | truth montages.
    #[arg(long)]
    pub montages: Option<PathBuf>,
    #[command(flatten)]
    pub training: ExperimentTraining,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,1.5,2")]
    pub sigmas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub training: ExperimentTraining,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub training: ExperimentTraining,
}

/// Thread count from the flag, else the environment, else 1.
pub fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{THREADS_ENV}=`{v}` is not a thread count")))?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err(Error::Config("thread count must be at least 1".into()));
    }
    Ok(n)
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<DatasetManifest> {
    let m = synthesize_dataset(a.kind, a.n_train, a.n_val, a.size, a.psf_sigma, a.noise, &a.out, a.seed)?;
    eprintln!(
        "wrote {} training and {} validation images to {}",
        m.train.len(),
        m.val.len(),
        a.out.display()
    );
    Ok(m)
}

fn metrics_text(trainer: &Trainer<'_>) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in &trainer.state().metrics {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Trains into the run directory `--out`; returns the best-validation checkpoint.
pub fn cmd_train(a: &TrainArgs) -> Result<Checkpoint> {
    set_num_threads(resolve_threads(a.threads)?);
    let cfg = a.config();
    cfg.validate()?;
    let manifest = DatasetManifest::load(&a.data)?;
    let data = TrainingData::load(&manifest)?;
    let model = model_config(&cfg, &data)?;
    let echo = cfg.to_echo();
    let out = &a.out;
    let config_path = out.join(CONFIG_FILE);
    let state_path = out.join(STATE_FILE);

    let mut trainer = if a.resume {
        let stored = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        if stored != echo {
            return Err(Error::Config(format!(
                "flags differ from the configuration recorded in {}",
                config_path.display()
            )));
        }
        let (state, state_echo) = TrainState::load(&state_path, cfg.base_channels, cfg.lr)?;
        if state_echo != echo {
            return Err(Error::Config(
                "training state belongs to a different configuration".into(),
            ));
        }
        eprintln!("resuming after epoch {}", state.epoch);
        Trainer::resume(&cfg, &model, &data, state)?
    } else {
        if config_path.exists() {
            return Err(Error::Config(format!(
                "{} already holds a run; pass --resume or choose another --out",
                out.display()
            )));
        }
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_atomic(&config_path, echo.as_bytes())?;
        write_atomic(&out.join(DATA_ECHO_FILE), manifest.to_text().as_bytes())?;
        Trainer::new(&cfg, &model, &data)?
    };
    write_atomic(&out.join(METRICS_FILE), metrics_text(&trainer).as_bytes())?;

    while !trainer.is_done() {
        let r = trainer.run_epoch()?;
        eprintln!(
            "epoch {:>4}  train {:.6e}  val {:.6e}  {:.1}s",
            r.epoch, r.train_loss, r.val_loss, r.wall_seconds
        );
        write_atomic(&out.join(METRICS_FILE), metrics_text(&trainer).as_bytes())?;
        trainer.state().save(&state_path, &echo)?;
    }
    let outcome = trainer.finish();
    save_checkpoint(&out.join(LAST_CHECKPOINT), &outcome.last)?;
    save_checkpoint(&out.join(BEST_CHECKPOINT), &outcome.best)?;
    eprintln!("checkpoints written to {}", out.display());
    Ok(outcome.best)
}

pub fn cmd_denoise(a: &DenoiseArgs) -> Result<()> {
    set_num_threads(resolve_threads(a.threads)?);
    let ck = load_checkpoint(&a.model)?;
    let img = load_image(&a.input)?;
    let (s, z) = denoise(&ck, &img)?;
    if a.pgm {
        save_pgm(&a.out_denoised, &s)?;
        save_pgm(&a.out_deconv, &z)?;
    } else {
        save_image(&a.out_denoised, &s)?;
        save_image(&a.out_deconv, &z)?;
    }
    Ok(())
}

fn echo_value<'a>(echo: &'a str, key: &str) -> Option<&'a str> {
    echo.lines().find_map(|l| l.strip_prefix(key)?.strip_prefix('='))
}

/// Scores a single prediction, or a run directory's best checkpoint on the
/// dataset's validation images (rows written to `<run>/eval.csv`).
pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<Vec<MetricsRecord>> {
    set_num_threads(resolve_threads(a.threads)?);
    if let (Some(pred), Some(gt)) = (&a.pred, &a.gt) {
        let v = psnr(&load_image(pred)?, &load_image(gt)?)?;
        println!(
            "psnr_db={}",
            if v.is_infinite() {
                "inf".to_string()
            } else {
                format!("{v:.6}")
            }
        );
        return Ok(Vec::new());
    }
    let (Some(run), Some(data)) = (&a.run, &a.data) else {
        return Err(Error::Config("pass --pred and --gt, or --run and --data".into()));
    };
    let ck = load_checkpoint(&run.join(BEST_CHECKPOINT))?;
    let manifest = DatasetManifest::load(data)?;
    let test = load_test_set(&manifest)?;
    let lambda: f64 = echo_value(&ck.train_echo, "lambda")
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.0);
    let seed: u64 = echo_value(&ck.train_echo, "seed")
        .and_then(|v| v.parse().ok())
        .unwrap_or(0);
    let true_sigma = manifest.generation.as_ref().map_or(1.0, |g| g.psf_sigma);
    let method = match (&ck.model.psf, lambda > 0.0) {
        (None, _) => Method::N2v,
        (Some(_), true) => Method::Ours,
        (Some(_), false) => Method::OursNoPos,
    };
    let montage_dir = run.join("montages");
    fs::create_dir_all(&montage_dir).map_err(|e| Error::io(&montage_dir, e))?;

    let mut acc = [(0.0, 0.0); 3];
    for (i, t) in test.iter().enumerate() {
        let (s, z) = denoise(&ck, &t.noisy)?;
        acc[0].0 += psnr(&t.noisy, &t.truth)?;
        acc[0].1 += negative_fraction(&t.noisy);
        acc[1].0 += psnr(&s, &t.truth)?;
        acc[1].1 += negative_fraction(&z);
        if method == Method::N2v {
            let c = baseline_n2v_conv(&ck, &PsfKernel::gaussian_default(true_sigma)?, &t.noisy)?;
            acc[2].0 += psnr(&c, &t.truth)?;
            acc[2].1 += negative_fraction(&c);
        }
        save_pgm(
            &montage_dir.join(format!("montage_{i:04}.pgm")),
            &montage(&[&t.noisy, &s, &z, &t.truth])?,
        )?;
    }
    let n = test.len() as f64;
    let row = |method, psf_sigma, (p, f): (f64, f64)| MetricsRecord {
        experiment: "evaluate".into(),
        method,
        psf_sigma,
        seed,
        psnr_db: p / n,
        negative_fraction: f / n,
        wall_seconds: 0.0,
    };
    let mut rows = vec![
        row(Method::NoisyInput, None, acc[0]),
        row(method, ck.model.psf.as_ref().map(PsfKernel::sigma), acc[1]),
    ];
    if method == Method::N2v {
        rows.push(row(Method::N2vConv, Some(true_sigma), acc[2]));
    }
    write_csv(&run.join("eval.csv"), &rows)?;
    print_rows(&rows);
    Ok(rows)
}

fn print_rows(rows: &[MetricsRecord]) {
    for s in summarize(rows) {
        let sigma = s.psf_sigma.map_or("none".into(), |v| v.to_string());
        println!(
            "{:<20} {:<12} psf_sigma={:<5} psnr_db={:.3}  negative_fraction={:.4}  seeds={}",
            s.experiment,
            s.method.to_string(),
            sigma,
            s.mean_psnr_db,
            s.mean_negative_fraction,
            s.seeds
        );
    }
}

fn runner(data: &Path, training: &ExperimentTraining) -> Result<ExperimentRunner> {
    set_num_threads(resolve_threads(training.threads)?);
    let template = training.template();
    template.validate()?;
    let manifest = DatasetManifest::load(data)?;
    Ok(ExperimentRunner::new(&manifest, template)?.with_progress(|line| eprintln!("{line}")))
}

pub fn cmd_compare(a: &CompareArgs) -> Result<Vec<MetricsRecord>> {
    let mut r = runner(&a.data, &a.training)?;
    if let Some(dir) = &a.montages {
        r = r.with_montage_dir(dir);
    }
    let rows = r.run_comparison(&a.seeds)?;
    write_csv(&a.out, &rows)?;
    print_rows(&rows);
    Ok(rows)
}

pub fn cmd_sweep_psf(a: &SweepArgs) -> Result<Vec<MetricsRecord>> {
    let mut r = runner(&a.data, &a.training)?;
    let rows = r.run_psf_sweep(&a.sigmas, &a.seeds)?;
    write_csv(&a.out, &rows)?;
    print_rows(&rows);
    Ok(rows)
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<Vec<MetricsRecord>> {
    let mut r = runner(&a.data, &a.training)?;
    let rows = r.run_positivity_ablation(&a.seeds)?;
    write_csv(&a.out, &rows)?;
    print_rows(&rows);
    Ok(rows)
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a).map(drop),
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Denoise(a) => cmd_denoise(a),
        Command::Evaluate(a) => cmd_evaluate(a).map(drop),
        Command::Compare(a) => cmd_compare(a).map(drop),
        Command::SweepPsf(a) => cmd_sweep_psf(a).map(drop),
        Command::AblatePositivity(a) => cmd_ablate(a).map(drop),
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 on failure, 2 on a usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn parser_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn default_train_flags_reproduce_default_config() {
        let cli = Cli::try_parse_from(["deconoise", "train", "--data", "d", "--out", "o"]).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        assert_eq!(a.config(), TrainConfig::default());
    }

    #[test]
    fn psf_none_parses() {
        assert_eq!("none".parse::<PsfSigma>().unwrap(), PsfSigma(None));
        assert_eq!("1.5".parse::<PsfSigma>().unwrap(), PsfSigma(Some(1.5)));
        assert!("-1".parse::<PsfSigma>().is_err());
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        assert_eq!(run(["deconoise", "train", "--bogus"]), 2);
        assert_eq!(run(["deconoise", "frobnicate"]), 2);
    }
}
