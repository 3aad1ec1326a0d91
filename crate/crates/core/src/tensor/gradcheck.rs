//! Central finite-difference checks for tape gradients, evaluated in `f64`.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Central-difference step used by the checks.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Largest per-input `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub max_rel_error: f64,
    /// Number of scalar coordinates that were perturbed.
    pub coordinates: usize,
}

/// Checks the gradient of the scalar produced by `build` with respect to
/// every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    check_subset(inputs, &all, DEFAULT_STEP, build)
}

/// Like [`check`] but only perturbs `coords[i]` of input `i`.
///
/// The norm-wise error makes the check robust to the rare coordinate whose
/// perturbation straddles a ReLU or max-pool kink.
pub fn check_subset<F>(inputs: &[Tensor<f64>], coords: &[Vec<usize>], step: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut coordinates = 0;
    let mut work = inputs.to_vec();
    for (i, idxs) in coords.iter().enumerate() {
        let analytic = tape.grad(vars[i]).expect("param leaves always get a gradient");
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for &j in idxs {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            diff += (analytic[j] - numeric).powi(2);
            na += analytic[j].powi(2);
            nn += numeric.powi(2);
            coordinates += 1;
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale > 0.0 {
            worst = worst.max(diff.sqrt() / scale);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        coordinates,
    })
}
