//! Depth-3 U-Net that predicts the phantom, followed by a frozen convolution
//! with the PSF that turns the phantom into the signal estimate.
//!
//! Layout for base width `w` (all 3×3 convolutions zero-padded, ReLU after
//! each, except the linear 1×1 output):
//!
//! ```text
//! enc1  1 → w → w          ──────────────────────────────┐ skip
//! enc2  w → 2w → 2w        (after 2× max-pool) ─────────┐ │
//! enc3  2w → 4w → 4w       (after 2× max-pool) ───────┐ │ │
//! bott  4w → 4w → 4w       (after 2× max-pool)        │ │ │
//! dec3  up, cat enc3: 8w → 2w → 2w  ◄─────────────────┘ │ │
//! dec2  up, cat enc2: 4w → w → w    ◄───────────────────┘ │
//! dec1  up, cat enc1: 2w → w → w    ◄─────────────────────┘
//! out   1×1: w → 1
//! ```

use crate::error::{Error, Result};
use crate::image::PsfKernel;
use crate::rng;
use crate::tensor::{Element, PadMode, Tape, Tensor, Var};

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use rand_distr::{Distribution, Normal};

/// Base width of the first encoder level.
pub const DEFAULT_BASE_CHANNELS: usize = 64;
/// Number of 2× down/up-sampling levels.
pub const DEPTH: usize = 3;
/// Spatial extents must be multiples of this.
pub const SIZE_MULTIPLE: usize = 1 << DEPTH;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Frozen PSF applied to the U-Net output; `None` is the plain
    /// blind-spot baseline.
    pub psf: Option<PsfKernel>,
    /// Standardisation statistics of the training inputs.
    pub mean: f64,
    pub std: f64,
    pub base_channels: usize,
}

impl ModelConfig {
    pub fn new(psf: Option<PsfKernel>, mean: f64, std: f64) -> Result<Self> {
        let config = Self {
            psf,
            mean,
            std,
            base_channels: DEFAULT_BASE_CHANNELS,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_base_channels(mut self, base_channels: usize) -> Result<Self> {
        self.base_channels = base_channels;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0 && self.std.is_finite() && self.mean.is_finite()) {
            return Err(Error::Config(format!(
                "standardisation needs finite mean and std > 0, got mean {} std {}",
                self.mean, self.std
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        Ok(())
    }
}

/// One convolution layer of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

/// All convolution layers in forward order.
pub fn layer_specs(base: usize) -> Vec<LayerSpec> {
    let w = base;
    let conv = |name: &str, cin, cout, kernel| LayerSpec {
        name: name.to_string(),
        in_channels: cin,
        out_channels: cout,
        kernel,
    };
    vec![
        conv("enc1.conv1", 1, w, 3),
        conv("enc1.conv2", w, w, 3),
        conv("enc2.conv1", w, 2 * w, 3),
        conv("enc2.conv2", 2 * w, 2 * w, 3),
        conv("enc3.conv1", 2 * w, 4 * w, 3),
        conv("enc3.conv2", 4 * w, 4 * w, 3),
        conv("bottleneck.conv1", 4 * w, 4 * w, 3),
        conv("bottleneck.conv2", 4 * w, 4 * w, 3),
        conv("dec3.conv1", 8 * w, 2 * w, 3),
        conv("dec3.conv2", 2 * w, 2 * w, 3),
        conv("dec2.conv1", 4 * w, w, 3),
        conv("dec2.conv2", w, w, 3),
        conv("dec1.conv1", 2 * w, w, 3),
        conv("dec1.conv2", w, w, 3),
        conv("out", w, 1, 1),
    ]
}

/// Trainable weights and biases, in [`layer_specs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams<T: Element = f32> {
    base_channels: usize,
    /// `(weight, bias)` per layer.
    layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Element> UNetParams<T> {
    pub fn from_layers(base_channels: usize, layers: Vec<(Tensor<T>, Tensor<T>)>) -> Result<Self> {
        let specs = layer_specs(base_channels);
        if specs.len() != layers.len() {
            return Err(Error::Config(format!(
                "expected {} layers, got {}",
                specs.len(),
                layers.len()
            )));
        }
        for (spec, (w, b)) in specs.iter().zip(&layers) {
            let wshape = [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel];
            if w.shape() != wshape || b.shape() != [spec.out_channels] {
                return Err(Error::Tensor {
                    name: spec.name.clone(),
                    message: format!(
                        "weight {:?} / bias {:?}, expected {wshape:?} / [{}]",
                        w.shape(),
                        b.shape(),
                        spec.out_channels
                    ),
                });
            }
        }
        Ok(Self { base_channels, layers })
    }

    pub fn base_channels(&self) -> usize {
        self.base_channels
    }

    pub fn layers(&self) -> &[(Tensor<T>, Tensor<T>)] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [(Tensor<T>, Tensor<T>)] {
        &mut self.layers
    }

    /// Named tensors: `<layer>.weight` and `<layer>.bias`.
    pub fn named(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        layer_specs(self.base_channels)
            .into_iter()
            .zip(&self.layers)
            .flat_map(|(spec, (w, b))| [(format!("{}.weight", spec.name), w), (format!("{}.bias", spec.name), b)])
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.numel() + b.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|(w, b)| w.is_finite() && b.is_finite())
    }

    pub fn cast<U: Element>(&self) -> UNetParams<U> {
        UNetParams {
            base_channels: self.base_channels,
            layers: self.layers.iter().map(|(w, b)| (w.cast(), b.cast())).collect(),
        }
    }

    /// All parameters flattened in order, for comparisons.
    pub fn flat(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.data().iter().chain(b.data()).copied())
            .collect()
    }
}

/// He-normal initialisation: weights `N(0, 2 / fan_in)`, zero biases.
pub fn init_params(base_channels: usize, seed: u64) -> UNetParams<f32> {
    let mut rng = rng::stream(seed, "init");
    let layers = layer_specs(base_channels)
        .iter()
        .map(|spec| {
            let fan_in = spec.in_channels * spec.kernel * spec.kernel;
            let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let shape = vec![spec.out_channels, spec.in_channels, spec.kernel, spec.kernel];
            let n = shape.iter().product();
            let w = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
            (
                Tensor::new(shape, w).expect("matching extent"),
                Tensor::zeros(vec![spec.out_channels]),
            )
        })
        .collect();
    UNetParams { base_channels, layers }
}

/// Recorded forward pass; `params[i]` are the `(weight, bias)` vars of layer `i`.
pub struct Forward<T: Element> {
    pub tape: Tape<T>,
    pub params: Vec<(Var, Var)>,
    /// Phantom estimate, de-standardised.
    pub z_hat: Var,
    /// Signal estimate: `z_hat * psf`, or `z_hat` without a PSF.
    pub s_hat: Var,
}

impl<T: Element> Forward<T> {
    /// Parameter gradients after `tape.backward`, in layer order.
    pub fn param_grads(&self) -> Vec<(&[T], &[T])> {
        self.params
            .iter()
            .map(|&(w, b)| {
                (
                    self.tape.grad(w).expect("params always receive a gradient"),
                    self.tape.grad(b).expect("params always receive a gradient"),
                )
            })
            .collect()
    }
}

/// Runs the network on raw (un-standardised) inputs of shape `[N, 1, H, W]`.
pub fn forward<T: Element>(input: &Tensor<T>, params: &UNetParams<T>, config: &ModelConfig) -> Result<Forward<T>> {
    if params.base_channels != config.base_channels {
        return Err(Error::Config(format!(
            "parameters have base width {} but the config says {}",
            params.base_channels, config.base_channels
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<(Var, Var)> = params
        .layers
        .iter()
        .map(|(wt, b)| (tape.param(wt.clone()), tape.param(b.clone())))
        .collect();
    let (z_hat, s_hat) = build_on_tape(&mut tape, input, &vars, config)?;
    Ok(Forward {
        tape,
        params: vars,
        z_hat,
        s_hat,
    })
}

/// Records the network on `tape` with parameter leaves `vars` (one
/// `(weight, bias)` pair per layer) and returns `(ẑ, ŝ)`.
pub fn build_on_tape<T: Element>(
    tape: &mut Tape<T>,
    input: &Tensor<T>,
    vars: &[(Var, Var)],
    config: &ModelConfig,
) -> Result<(Var, Var)> {
    let expected = layer_specs(config.base_channels).len();
    if vars.len() != expected {
        return Err(Error::Config(format!(
            "network has {expected} layers, got {}",
            vars.len()
        )));
    }
    let (_, c, h, w) = input.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("network takes 1 input channel, got {c}")));
    }
    if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        return Err(Error::Shape(format!(
            "patch {h}x{w} must be divisible by {SIZE_MULTIPLE} in both dimensions"
        )));
    }
    let mean = T::from_f64(config.mean);
    let std = T::from_f64(config.std);

    let x = tape.constant(input.map(|v| (v - mean) / std));

    let mut layer = 0;
    let mut conv_relu = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
        let (wt, b) = vars[layer];
        layer += 1;
        let y = tape.conv2d(v, wt, Some(b), PadMode::Zero)?;
        Ok(tape.relu(y))
    };

    let mut skips = Vec::with_capacity(DEPTH);
    let mut v = x;
    for _ in 0..DEPTH {
        v = conv_relu(tape, v)?;
        v = conv_relu(tape, v)?;
        skips.push(v);
        v = tape.maxpool2(v)?;
    }
    v = conv_relu(tape, v)?;
    v = conv_relu(tape, v)?;
    for skip in skips.into_iter().rev() {
        let up = tape.upsample_nearest2(v)?;
        v = tape.concat_channels(up, skip)?;
        v = conv_relu(tape, v)?;
        v = conv_relu(tape, v)?;
    }
    let (wt, b) = vars[vars.len() - 1];
    let out = tape.conv2d(v, wt, Some(b), PadMode::Zero)?;

    let z_hat = tape.affine(out, std, mean);
    let s_hat = match &config.psf {
        None => z_hat,
        Some(psf) => {
            let k = psf.size();
            let kernel = Tensor::new(
                vec![1, 1, k, k],
                psf.flipped().iter().map(|&v| T::from_f64(v as f64)).collect(),
            )?;
            let kv = tape.constant(kernel);
            tape.conv2d(z_hat, kv, None, PadMode::Reflect)?
        }
    };
    Ok((z_hat, s_hat))
}
