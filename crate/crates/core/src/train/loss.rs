use rand::Rng;

use crate::error::{shape_err, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Tape, Tensor, Var};

fn same_shape<T: Scalar>(op: &'static str, tape: &Tape<T>, x: Var, other: &Tensor<T>) -> Result<usize> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape != other.shape() {
        return Err(shape_err(op, format!("{shape:?} vs {:?}", other.shape())));
    }
    Ok(shape[0])
}

/// `mean_i ‖x̂_i − sg(x̂_i + V_i)‖²`. The target is frozen, so the gradient
/// with respect to `x̂` is `−2V/N`.
pub fn drift_loss<T: Scalar>(tape: &Tape<T>, xhat: Var, v: &Tensor<T>) -> Result<Var> {
    let n = same_shape("drift_loss", tape, xhat, v)?;
    let vv = tape.constant(v.clone());
    let target = tape.add(xhat, vv)?;
    let target = tape.stop_gradient(target);
    let diff = tape.sub(xhat, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, T::one() / lit(n as f64)))
}

/// Mean squared error over batch and dimensions.
pub fn mse_loss<T: Scalar>(tape: &Tape<T>, xhat: Var, y: &Tensor<T>) -> Result<Var> {
    same_shape("mse_loss", tape, xhat, y)?;
    let yv = tape.constant(y.clone());
    let diff = tape.sub(xhat, yv)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// `w_drift · L_drift + w_mse · L_mse`.
pub fn total_loss<T: Scalar>(tape: &Tape<T>, drift: Var, mse: Var, w_drift: f64, w_mse: f64) -> Result<Var> {
    let a = tape.scale(drift, lit(w_drift));
    let b = tape.scale(mse, lit(w_mse));
    tape.add(a, b)
}

/// Picks one demonstration row uniformly at random for each of `n` predictions.
pub fn pair_demos<T: Scalar>(rng: &mut impl Rng, demos: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let (m, d) = demos.dims2()?;
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        data.extend_from_slice(demos.row(rng.random_range(0..m)));
    }
    Tensor::new([n, d], data)
}
