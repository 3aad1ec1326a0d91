//! Blind-spot training: patch sampling, masking, the masked loss with the
//! positivity penalty, and Adam with gradient accumulation.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::image::{DatasetManifest, Image, PsfKernel};
use crate::model::{forward, init_params, Checkpoint, ModelConfig, UNetParams};
use crate::rng;
use crate::tensor::Element;

mod adam;
mod config;
mod loss;
mod mask;
mod state;

pub use adam::Adam;
pub use config::TrainConfig;
pub use loss::masked_loss;
pub use mask::{apply_mask, mask_count, sample_patch, MaskBatch};
pub use state::{BestSoFar, TrainState};

/// Header of the per-epoch metrics CSV.
pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,wall_seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_seconds: f64,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.3}",
            self.epoch, self.train_loss, self.val_loss, self.wall_seconds
        )
    }
}

/// Noisy training and validation images with names for error messages.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub train: Vec<Image>,
    pub train_names: Vec<String>,
    pub val: Vec<Image>,
    pub val_names: Vec<String>,
}

impl TrainingData {
    pub fn from_images(train: Vec<Image>, val: Vec<Image>) -> Self {
        Self {
            train_names: (0..train.len()).map(|i| format!("train[{i}]")).collect(),
            val_names: (0..val.len()).map(|i| format!("val[{i}]")).collect(),
            train,
            val,
        }
    }

    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        Ok(Self {
            train: manifest.train_noisy()?,
            train_names: manifest.train.iter().map(|e| e.noisy.clone()).collect(),
            val: manifest.val_noisy()?,
            val_names: manifest.val.iter().map(|e| e.noisy.clone()).collect(),
        })
    }

    /// Fails on the first image smaller than `patch`, naming it.
    pub fn check_patch(&self, patch: usize) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::InvalidArgument("training split is empty".into()));
        }
        let all = self
            .train
            .iter()
            .zip(&self.train_names)
            .chain(self.val.iter().zip(&self.val_names));
        for (img, name) in all {
            if img.height() < patch || img.width() < patch {
                return Err(Error::InvalidArgument(format!(
                    "{name} is {}x{}, smaller than the {patch}x{patch} training patch",
                    img.height(),
                    img.width()
                )));
            }
        }
        Ok(())
    }

    /// Images scored for validation; the training split when none are held out.
    fn val_pool(&self) -> &[Image] {
        if self.val.is_empty() {
            &self.train
        } else {
            &self.val
        }
    }
}

/// Mean and standard deviation of all pixels. A constant set yields std 1.
pub fn standardization(images: &[Image]) -> (f64, f64) {
    let n: usize = images.iter().map(Image::len).sum();
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = images.iter().flat_map(|i| i.pixels()).map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = images
        .iter()
        .flat_map(|i| i.pixels())
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    (mean, if std > 0.0 { std } else { 1.0 })
}

/// Network configuration for `cfg` with statistics from the training split.
pub fn model_config(cfg: &TrainConfig, data: &TrainingData) -> Result<ModelConfig> {
    let psf = cfg.psf_sigma.map(PsfKernel::gaussian_default).transpose()?;
    let (mean, std) = standardization(&data.train);
    ModelConfig::new(psf, mean, std)?.with_base_channels(cfg.base_channels)
}

/// Loss of one masked patch and the gradient of every parameter tensor, in
/// [`UNetParams::named`] order.
pub fn patch_gradients<T: Element>(
    params: &UNetParams<T>,
    model: &ModelConfig,
    batch: &MaskBatch,
    lambda: f64,
) -> Result<(f64, Vec<Vec<T>>)> {
    let mut fwd = forward(&batch.patch.to_tensor::<T>(), params, model)?;
    let targets: Vec<T> = batch.targets.iter().map(|&v| T::from_f64(v as f64)).collect();
    let loss = masked_loss(
        &mut fwd.tape,
        fwd.s_hat,
        fwd.z_hat,
        &batch.flat_indices(),
        &targets,
        T::from_f64(lambda),
        T::from_f64(model.std),
    )?;
    fwd.tape.backward(loss)?;
    let value = fwd.tape.value(loss).data()[0].as_f64();
    let grads = fwd
        .param_grads()
        .into_iter()
        .flat_map(|(w, b)| [w.to_vec(), b.to_vec()])
        .collect();
    Ok((value, grads))
}

/// Loss of one masked patch without recording gradients.
pub fn patch_loss(params: &UNetParams<f32>, model: &ModelConfig, batch: &MaskBatch, lambda: f64) -> Result<f64> {
    let mut fwd = forward(&batch.patch.to_tensor::<f32>(), params, model)?;
    let targets = batch.targets.clone();
    let loss = masked_loss(
        &mut fwd.tape,
        fwd.s_hat,
        fwd.z_hat,
        &batch.flat_indices(),
        &targets,
        lambda as f32,
        model.std as f32,
    )?;
    Ok(fwd.tape.value(loss).data()[0] as f64)
}

/// One Adam update from the average gradient over `batches`; returns the
/// mean loss.
pub fn accumulated_step<T: Element>(
    params: &mut UNetParams<T>,
    adam: &mut Adam<T>,
    model: &ModelConfig,
    batches: &[MaskBatch],
    lambda: f64,
) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("virtual batch is empty".into()));
    }
    let mut sum: Option<Vec<Vec<T>>> = None;
    let mut loss = 0.0;
    for b in batches {
        let (l, g) = patch_gradients(params, model, b, lambda)?;
        loss += l;
        match &mut sum {
            None => sum = Some(g),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(g) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x = *x + y;
                    }
                }
            }
        }
    }
    let scale = T::from_f64(1.0 / batches.len() as f64);
    let mut avg = sum.expect("at least one batch");
    avg.iter_mut().flatten().for_each(|v| *v = *v * scale);

    let grads: Vec<&[T]> = avg.iter().map(Vec::as_slice).collect();
    let mut slots: Vec<&mut [T]> = params
        .layers_mut()
        .iter_mut()
        .flat_map(|(w, b)| [w.data_mut(), b.data_mut()])
        .collect();
    adam.step(&mut slots, &grads)?;
    Ok(loss / batches.len() as f64)
}

/// Parameter tensor sizes in [`UNetParams::named`] order.
pub fn param_sizes<T: Element>(params: &UNetParams<T>) -> Vec<usize> {
    params
        .layers()
        .iter()
        .flat_map(|(w, b)| [w.numel(), b.numel()])
        .collect()
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Lowest validation loss seen; the initialisation when no epoch ran.
    pub best: Checkpoint,
    pub metrics: Vec<EpochRecord>,
}

/// Stateful training loop; drive it epoch by epoch or call [`train`].
pub struct Trainer<'a> {
    cfg: TrainConfig,
    model: ModelConfig,
    data: &'a TrainingData,
    val_set: Vec<MaskBatch>,
    state: TrainState,
    started: Instant,
    elapsed_before: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, model: &ModelConfig, data: &'a TrainingData) -> Result<Self> {
        let params = init_params(cfg.base_channels, cfg.seed);
        let state = TrainState {
            epoch: 0,
            adam: Adam::new(cfg.lr, &param_sizes(&params)),
            params,
            best: None,
            metrics: Vec::new(),
            elapsed: 0.0,
        };
        Self::resume(cfg, model, data, state)
    }

    /// Continues from a saved state produced with the same configuration.
    pub fn resume(cfg: &TrainConfig, model: &ModelConfig, data: &'a TrainingData, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        if model.base_channels != cfg.base_channels || state.params.base_channels() != cfg.base_channels {
            return Err(Error::Config(
                "base_channels disagrees between config, model and state".into(),
            ));
        }
        data.check_patch(cfg.patch)?;
        let mut rng = rng::stream(cfg.seed, "val");
        let val_set = (0..cfg.val_patches)
            .map(|_| {
                let p = sample_patch(data.val_pool(), cfg.patch, &mut rng)?;
                apply_mask(&p, cfg.mask_rate, cfg.mask_neighborhood, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            model: model.clone(),
            data,
            val_set,
            elapsed_before: state.elapsed,
            state,
            started: Instant::now(),
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
    }

    /// The masked patches of optimizer step `step` (0-based, counted over
    /// the whole run).
    pub fn step_batches(&self, step: u64) -> Result<Vec<MaskBatch>> {
        let mut data_rng = rng::substream(self.cfg.seed, "data", step);
        let mut mask_rng = rng::substream(self.cfg.seed, "mask", step);
        (0..self.cfg.virtual_batch)
            .map(|_| {
                let p = sample_patch(&self.data.train, self.cfg.patch, &mut data_rng)?;
                apply_mask(&p, self.cfg.mask_rate, self.cfg.mask_neighborhood, &mut mask_rng)
            })
            .collect()
    }

    pub fn validation_loss(&self) -> Result<f64> {
        let total = self
            .val_set
            .iter()
            .map(|b| patch_loss(&self.state.params, &self.model, b, self.cfg.lambda_pos))
            .sum::<Result<f64>>()?;
        Ok(total / self.val_set.len() as f64)
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let mut train_loss = 0.0;
        for _ in 0..self.cfg.steps_per_epoch {
            let step = self.state.adam.step_count();
            let batches = self.step_batches(step)?;
            train_loss += accumulated_step(
                &mut self.state.params,
                &mut self.state.adam,
                &self.model,
                &batches,
                self.cfg.lambda_pos,
            )?;
        }
        self.state.epoch += 1;
        let val_loss = self.validation_loss()?;
        if self.state.best.as_ref().is_none_or(|b| val_loss < b.val_loss) {
            self.state.best = Some(BestSoFar {
                epoch: self.state.epoch,
                val_loss,
                params: self.state.params.clone(),
            });
        }
        self.state.elapsed = self.elapsed_before + self.started.elapsed().as_secs_f64();
        let record = EpochRecord {
            epoch: self.state.epoch,
            train_loss: train_loss / self.cfg.steps_per_epoch as f64,
            val_loss,
            wall_seconds: self.state.elapsed,
        };
        self.state.metrics.push(record.clone());
        Ok(record)
    }

    pub fn checkpoint(&self, params: &UNetParams<f32>) -> Checkpoint {
        Checkpoint {
            params: params.clone(),
            model: self.model.clone(),
            train_echo: self.cfg.to_echo(),
        }
    }

    pub fn finish(self) -> TrainOutcome {
        let best = self.state.best.as_ref().map_or(&self.state.params, |b| &b.params);
        TrainOutcome {
            best: self.checkpoint(best),
            last: self.checkpoint(&self.state.params),
            metrics: self.state.metrics.clone(),
        }
    }
}

/// Trains to completion, calling `on_epoch` after every epoch.
pub fn train(
    data: &TrainingData,
    cfg: &TrainConfig,
    model: &ModelConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Trainer<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, model, data)?;
    while !trainer.is_done() {
        let record = trainer.run_epoch()?;
        on_epoch(&record, &trainer)?;
    }
    Ok(trainer.finish())
}
