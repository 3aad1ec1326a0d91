//! Python bindings: images, PSFs, noise, dataset synthesis, training,
//! inference and metrics.

use std::path::PathBuf;

use deconoise_core::evaluation;
use deconoise_core::image::{self, io, NoiseSpec, PhantomKind, PsfKernel};
use deconoise_core::model::{self, Checkpoint};
use deconoise_core::tensor::PadMode;
use deconoise_core::training::{self, TrainConfig, TrainingData};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn err(e: deconoise_core::Error) -> PyErr {
    match e {
        deconoise_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// A single-channel float32 image.
#[pyclass(name = "Image", module = "deconoise")]
#[derive(Clone)]
pub struct PyImage {
    inner: image::Image,
}

#[pymethods]
impl PyImage {
    /// Builds an image from a list of equal-length rows.
    #[new]
    fn new(rows: Vec<Vec<f32>>) -> PyResult<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(PyValueError::new_err("rows have different lengths"));
        }
        let inner = image::Image::new(h, w, rows.into_iter().flatten().collect()).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            inner: image::Image::filled(height, width, value),
        }
    }

    /// Reads a raw tensor file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::load_image(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_image(&path, &self.inner).map_err(err)
    }

    /// Writes a 16-bit PGM scaled to the image's range.
    fn save_pgm(&self, path: PathBuf) -> PyResult<()> {
        io::save_pgm(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn get(&self, row: usize, col: usize) -> PyResult<f32> {
        if row >= self.inner.height() || col >= self.inner.width() {
            return Err(PyValueError::new_err("pixel index out of range"));
        }
        Ok(self.inner.get(row, col))
    }

    fn to_list(&self) -> Vec<Vec<f32>> {
        self.inner
            .pixels()
            .chunks(self.inner.width())
            .map(<[f32]>::to_vec)
            .collect()
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.height(), self.inner.width())
    }
}

/// A normalised 2-D Gaussian point spread function.
#[pyclass(name = "Psf", module = "deconoise")]
#[derive(Clone)]
pub struct PyPsf {
    inner: PsfKernel,
}

#[pymethods]
impl PyPsf {
    /// `sigma = 0` gives the identity kernel; `size` defaults to an odd
    /// width covering about three standard deviations.
    #[new]
    #[pyo3(signature = (sigma, size=None))]
    fn new(sigma: f64, size: Option<usize>) -> PyResult<Self> {
        let inner = match size {
            Some(s) => PsfKernel::gaussian(sigma, s),
            None => PsfKernel::gaussian_default(sigma),
        }
        .map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma()
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size()
    }

    fn weights(&self) -> Vec<Vec<f32>> {
        self.inner
            .weights()
            .chunks(self.inner.size())
            .map(<[f32]>::to_vec)
            .collect()
    }

    /// Convolves `image` with the kernel using mirrored borders.
    fn convolve(&self, image: &PyImage) -> PyResult<PyImage> {
        Ok(PyImage {
            inner: image::convolve_psf(&image.inner, &self.inner, PadMode::Reflect).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Psf(sigma={}, size={})", self.inner.sigma(), self.inner.size())
    }
}

/// Adds noise described by `spec` (`none`, `gauss:SIGMA` or
/// `pg:SCALE,SIGMA`) with a fixed seed.
#[pyfunction]
fn add_noise(image: &PyImage, spec: &str, seed: u64) -> PyResult<PyImage> {
    let spec: NoiseSpec = spec.parse().map_err(err)?;
    Ok(PyImage {
        inner: image::add_noise(&image.inner, spec, seed).map_err(err)?.image,
    })
}

/// Generates `n` phantoms of the given kind (`blobs` or `text_like`).
#[pyfunction]
fn generate_phantoms(kind: &str, n: usize, size: usize, seed: u64) -> PyResult<Vec<PyImage>> {
    let kind: PhantomKind = kind.parse().map_err(err)?;
    Ok(image::generate_phantoms(kind, n, size, seed)
        .map_err(err)?
        .into_iter()
        .map(|inner| PyImage { inner })
        .collect())
}

/// Writes a synthetic dataset directory; returns `(n_train, n_val)`.
#[pyfunction]
#[pyo3(signature = (out, kind="text_like", n_train=200, n_val=20, size=128, psf_sigma=1.0, noise="gauss:100", seed=0))]
#[allow(clippy::too_many_arguments)]
fn synthesize(
    py: Python<'_>,
    out: PathBuf,
    kind: &str,
    n_train: usize,
    n_val: usize,
    size: usize,
    psf_sigma: f64,
    noise: &str,
    seed: u64,
) -> PyResult<(usize, usize)> {
    let kind: PhantomKind = kind.parse().map_err(err)?;
    let noise: NoiseSpec = noise.parse().map_err(err)?;
    let m = py
        .detach(|| image::synthesize_dataset(kind, n_train, n_val, size, psf_sigma, noise, &out, seed))
        .map_err(err)?;
    Ok((m.train.len(), m.val.len()))
}

/// A trained network together with its standardisation and PSF.
#[pyclass(name = "Model", module = "deconoise")]
#[derive(Clone)]
pub struct PyModel {
    inner: Checkpoint,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: model::load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&path, &self.inner).map_err(err)
    }

    /// Returns `(denoised, deconvolved)`.
    fn denoise(&self, py: Python<'_>, image: &PyImage) -> PyResult<(PyImage, PyImage)> {
        let (s, z) = py
            .detach(|| evaluation::denoise(&self.inner, &image.inner))
            .map_err(err)?;
        Ok((PyImage { inner: s }, PyImage { inner: z }))
    }

    #[getter]
    fn psf_sigma(&self) -> Option<f64> {
        self.inner.model.psf.as_ref().map(PsfKernel::sigma)
    }

    #[getter]
    fn base_channels(&self) -> usize {
        self.inner.model.base_channels
    }

    /// The training configuration in `key=value` form.
    #[getter]
    fn config(&self) -> String {
        self.inner.train_echo.clone()
    }
}

/// Trains on the dataset directory `data`; returns the checkpoint with the
/// lowest validation loss. `psf_sigma=None` trains without a PSF layer.
#[pyfunction]
#[pyo3(signature = (
    data, psf_sigma=Some(1.0), lambda_pos=1.0, epochs=200, steps_per_epoch=10, virtual_batch=20,
    patch=96, mask_rate=0.03125, lr=0.001, seed=0, base_channels=64, val_patches=20
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    data: PathBuf,
    psf_sigma: Option<f64>,
    lambda_pos: f64,
    epochs: usize,
    steps_per_epoch: usize,
    virtual_batch: usize,
    patch: usize,
    mask_rate: f64,
    lr: f64,
    seed: u64,
    base_channels: usize,
    val_patches: usize,
) -> PyResult<PyModel> {
    let cfg = TrainConfig {
        lr,
        epochs,
        steps_per_epoch,
        virtual_batch,
        patch,
        mask_rate,
        lambda_pos,
        psf_sigma,
        seed,
        base_channels,
        val_patches,
        ..TrainConfig::default()
    };
    let best = py
        .detach(|| -> deconoise_core::Result<Checkpoint> {
            cfg.validate()?;
            let manifest = image::DatasetManifest::load(&data)?;
            let td = TrainingData::load(&manifest)?;
            let model = training::model_config(&cfg, &td)?;
            Ok(training::train(&td, &cfg, &model, |_, _| Ok(()))?.best)
        })
        .map_err(err)?;
    Ok(PyModel { inner: best })
}

/// PSNR in dB with the peak taken as the ground truth's range.
#[pyfunction]
fn psnr(pred: &PyImage, gt: &PyImage) -> PyResult<f64> {
    evaluation::psnr(&pred.inner, &gt.inner).map_err(err)
}

/// Share of pixels below zero.
#[pyfunction]
fn negative_fraction(image: &PyImage) -> f64 {
    evaluation::negative_fraction(&image.inner)
}

#[pymodule]
pub fn deconoise(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyPsf>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(add_noise, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantoms, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(negative_fraction, m)?)?;
    Ok(())
}
