//! Adam with bias correction and decoupled weight decay, and the poly
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;

/// First and second moments of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T: Scalar = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(len: usize) -> Self {
        Moments { m: vec![T::zero(); len], v: vec![T::zero(); len] }
    }
}

/// Optimizer hyper-parameters that stay fixed over a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub eps: f64,
    pub weight_decay: f64,
}

/// One in-place update. `step` is 1-based and drives bias correction.
///
/// `p ← p − lr·m̂/(√v̂ + eps) − lr·wd·p`
pub fn adam_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    state: &mut Moments<T>,
    step: u64,
    lr: f64,
    hp: AdamParams,
) -> Result<()> {
    let n = param.len();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::dim(format!(
            "adam_step: param {n}, grad {}, moments {}/{}",
            grad.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if step == 0 {
        return Err(Error::dim("adam_step: step counter starts at 1"));
    }
    let c1 = 1.0 - BETA1.powi(step as i32);
    let c2 = 1.0 - BETA2.powi(step as i32);
    let (b1, b2) = (T::from_f64(BETA1), T::from_f64(BETA2));
    let (one, lr_t) = (T::one(), T::from_f64(lr));
    let (c1, c2, eps, decay) = (T::from_f64(c1), T::from_f64(c2), T::from_f64(hp.eps), T::from_f64(lr * hp.weight_decay));
    for i in 0..n {
        let g = grad[i];
        let m = b1 * state.m[i] + (one - b1) * g;
        let v = b2 * state.v[i] + (one - b2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let update = lr_t * (m / c1) / ((v / c2).sqrt() + eps);
        param[i] = param[i] - update - decay * param[i];
    }
    Ok(())
}

/// `base · (1 − iter/max_iter)^power`.
pub fn poly_lr(base_lr: f64, iter: u64, max_iter: u64, power: f64) -> f64 {
    if max_iter == 0 {
        return base_lr;
    }
    let frac = 1.0 - (iter.min(max_iter) as f64 / max_iter as f64);
    base_lr * frac.powf(power)
}
