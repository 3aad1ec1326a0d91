use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal, Poisson};

use super::Image;
use crate::error::{Error, Result};
use crate::rng;

/// Pixel-wise, signal-conditional, zero-centred noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSpec {
    None,
    /// `x = s + N(0, sigma²)`.
    Gaussian {
        sigma: f64,
    },
    /// `x = scale · Pois(s / scale) + N(0, sigma²)`.
    PoissonGaussian {
        scale: f64,
        sigma: f64,
    },
}

impl NoiseSpec {
    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        match *self {
            NoiseSpec::None => Ok(()),
            NoiseSpec::Gaussian { sigma } if ok(sigma) => Ok(()),
            NoiseSpec::PoissonGaussian { scale, sigma } if ok(sigma) && ok(scale) && scale > 0.0 => Ok(()),
            other => Err(Error::InvalidArgument(format!("invalid noise parameters {other}"))),
        }
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseSpec::None => write!(f, "none"),
            NoiseSpec::Gaussian { sigma } => write!(f, "gauss:{sigma}"),
            NoiseSpec::PoissonGaussian { scale, sigma } => write!(f, "pg:{scale},{sigma}"),
        }
    }
}

impl FromStr for NoiseSpec {
    type Err = Error;

    /// Parses `none`, `gauss:SIGMA` or `pg:SCALE,SIGMA`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("noise `{s}` is not none, gauss:SIGMA or pg:SCALE,SIGMA"));
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        let spec = match s.split_once(':') {
            None if s == "none" => NoiseSpec::None,
            Some(("gauss", sigma)) => NoiseSpec::Gaussian { sigma: num(sigma)? },
            Some(("pg", rest)) => {
                let (scale, sigma) = rest.split_once(',').ok_or_else(bad)?;
                NoiseSpec::PoissonGaussian {
                    scale: num(scale)?,
                    sigma: num(sigma)?,
                }
            }
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone)]
pub struct NoisyImage {
    pub image: Image,
    /// Pixels whose negative signal was clamped to a zero Poisson rate.
    pub clamped: usize,
}

/// Draws a noisy observation of `signal`, independently per pixel.
pub fn add_noise(signal: &Image, spec: NoiseSpec, seed: u64) -> Result<NoisyImage> {
    spec.validate()?;
    let mut rng = rng::stream(seed, "noise");
    let mut clamped = 0;
    let image = match spec {
        NoiseSpec::None => signal.clone(),
        NoiseSpec::Gaussian { sigma } => {
            let normal = Normal::new(0.0, sigma).expect("validated sigma");
            let pixels = signal
                .pixels()
                .iter()
                .map(|&s| (s as f64 + normal.sample(&mut rng)) as f32)
                .collect();
            Image::new(signal.height(), signal.width(), pixels)?
        }
        NoiseSpec::PoissonGaussian { scale, sigma } => {
            let normal = Normal::new(0.0, sigma).expect("validated sigma");
            let mut pixels = Vec::with_capacity(signal.len());
            for &s in signal.pixels() {
                let rate = s as f64 / scale;
                let counts = if rate > 0.0 {
                    Poisson::new(rate).expect("positive rate").sample(&mut rng)
                } else {
                    if rate < 0.0 {
                        clamped += 1;
                    }
                    0.0
                };
                pixels.push((scale * counts + normal.sample(&mut rng)) as f32);
            }
            Image::new(signal.height(), signal.width(), pixels)?
        }
    };
    Ok(NoisyImage { image, clamped })
}
