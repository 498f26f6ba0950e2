//! Adam with decoupled weight decay, and EMA shadow weights.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter optimizer state.
#[derive(Debug, Clone)]
pub struct OptimState<F: Scalar = f32> {
    pub m: Tensor<F>,
    pub v: Tensor<F>,
    pub step: u64,
}

impl<F: Scalar> OptimState<F> {
    pub fn new(shape: &[usize]) -> Self {
        OptimState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

/// Bias-corrected Adam update. Weight decay is decoupled: applied directly to
/// the parameter, never folded into the gradient moments.
pub fn adam_step<F: Scalar>(
    param: &mut Tensor<F>,
    grad: &Tensor<F>,
    state: &mut OptimState<F>,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(Error::ShapeMismatch(format!(
            "adam_step param {:?} grad {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
        return Err(Error::InvalidArgument("adam betas must be in [0,1)".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = F::of_f64(cfg.beta1);
    let b2 = F::of_f64(cfg.beta2);
    let lr = F::of_f64(cfg.lr);
    let eps = F::of_f64(cfg.eps);
    let wd = F::of_f64(cfg.weight_decay);
    let c1 = F::one() - b1.powi(t);
    let c2 = F::one() - b2.powi(t);
    let one = F::one();
    for i in 0..param.numel() {
        let g = grad.data()[i];
        let m = b1 * state.m.data()[i] + (one - b1) * g;
        let v = b2 * state.v.data()[i] + (one - b2) * g * g;
        state.m.data_mut()[i] = m;
        state.v.data_mut()[i] = v;
        let mhat = m / c1;
        let vhat = v / c2;
        let p = param.data()[i];
        param.data_mut()[i] = p - lr * mhat / (vhat.sqrt() + eps) - lr * wd * p;
    }
    Ok(())
}

/// `shadow' = decay * shadow + (1 - decay) * params`, elementwise.
pub fn ema_update<F: Scalar>(shadow: &mut Tensor<F>, params: &Tensor<F>, decay: f64) -> Result<()> {
    if shadow.shape() != params.shape() {
        return Err(Error::ShapeMismatch("ema_update".into()));
    }
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::InvalidArgument("ema decay must be in [0,1]".into()));
    }
    let d = F::of_f64(decay);
    let one_minus = F::one() - d;
    for (s, &p) in shadow.data_mut().iter_mut().zip(params.data()) {
        *s = d * *s + one_minus * p;
    }
    Ok(())
}
