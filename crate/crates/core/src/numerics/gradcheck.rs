//! Central finite-difference check of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// `f` records a scalar function of its input on the given tape. Returns the
/// largest `|analytic − numeric| / max(1, |numeric|)` over all coordinates.
pub fn check_gradients<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Contract(format!(
            "finite-difference step must lie in (0, 1e-3], got {eps}"
        )));
    }

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let root = f(&mut tape, xv)?;
    finite(tape.value(root).item())?;
    let grads = tape.backward(root)?;
    let analytic = grads
        .get(xv)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(x.shape().to_vec(), data)?);
        let r = f(&mut tape, v)?;
        finite(tape.value(r).item())
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("function evaluated to {v}")))
    }
}
