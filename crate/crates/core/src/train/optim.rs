use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Adam moments per parameter name, plus the number of steps taken.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

/// One decoupled-weight-decay Adam update of every parameter that has a
/// gradient. Parameters without a gradient are left alone.
///
/// `θ ← θ·(1 − lr·wd) − lr · m̂ / (√v̂ + ε)`
pub fn adamw_step(
    params: &mut [(String, &mut Tensor)],
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    opt: &AdamW,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NanGradient(format!("{name}[{i}]")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let decay = 1.0 - lr * opt.weight_decay;

    for (name, param) in params.iter_mut() {
        let Some(g) = grads.get(name.as_str()) else {
            continue;
        };
        if g.shape() != param.shape() {
            return Err(Error::Shape(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                param.shape()
            )));
        }
        let shape = param.shape().to_vec();
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(shape.clone()));
        let mut m_new = m.data().to_vec();
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(shape.clone()));
        let mut v_new = v.data().to_vec();
        let mut theta = param.data().to_vec();

        for (((th, mi), vi), gi) in theta
            .iter_mut()
            .zip(m_new.iter_mut())
            .zip(v_new.iter_mut())
            .zip(g.data())
        {
            *mi = opt.beta1 * *mi + (1.0 - opt.beta1) * gi;
            *vi = opt.beta2 * *vi + (1.0 - opt.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *th = *th * decay - lr * (m_hat / (v_hat.sqrt() + opt.eps));
        }

        let nonfinite = |_| Error::NanGradient(name.clone());
        state.first.insert(name.clone(), Tensor::new(shape.clone(), m_new).map_err(nonfinite)?);
        state.second.insert(name.clone(), Tensor::new(shape.clone(), v_new).map_err(nonfinite)?);
        **param = Tensor::new(shape, theta).map_err(nonfinite)?;
    }
    Ok(())
}

/// Rescales all gradients together so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!("max_norm must be > 0, got {max_norm}")));
    }
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        for g in grads.values_mut() {
            let scaled = g.data().iter().map(|v| v * max_norm / norm).collect();
            *g = Tensor::new(g.shape().to_vec(), scaled)?;
        }
    }
    Ok(norm)
}
