use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Records the training objective on `tape`:
/// `mean_{i∈M} ((ŝ_i − x_i) / u)² + λ · mean_i max(0, −ẑ_i / u)`.
///
/// `indices` are flat positions in `s_hat`, `targets` the noisy values there.
/// `u` (`scale`) is the standard deviation of the training data during
/// training, so both terms are measured in the units the network works in.
/// The positivity term is left out entirely when `lambda` is zero.
pub fn masked_loss<T: Element>(
    tape: &mut Tape<T>,
    s_hat: Var,
    z_hat: Var,
    indices: &[usize],
    targets: &[T],
    lambda: T,
    scale: T,
) -> Result<Var> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("loss needs at least one masked pixel".into()));
    }
    if indices.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} masked indices but {} targets",
            indices.len(),
            targets.len()
        )));
    }
    let picked = tape.gather(s_hat, indices)?;
    let x = tape.constant(Tensor::new(vec![targets.len()], targets.to_vec())?);
    let r = tape.sub(picked, x)?;
    let sq = tape.mul(r, r)?;
    let mse = tape.mean(sq)?;
    let mse = tape.affine(mse, T::one() / (scale * scale), T::zero());
    if lambda == T::zero() {
        return Ok(mse);
    }
    let neg = tape.affine(z_hat, -T::one(), T::zero());
    let neg = tape.relu(neg);
    let pos = tape.mean(neg)?;
    let pos = tape.affine(pos, lambda / scale, T::zero());
    tape.add(mse, pos)
}
