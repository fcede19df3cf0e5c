//! Parameterized building blocks shared by the model modules.

use rand::Rng;

use super::{ParamStore, ParamVars, NORM_EPS};
use crate::error::Result;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Linear layer weights `[fan_in, fan_out]` with Xavier-normal init.
pub(crate) fn init_linear<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    store.insert(format!("{name}.weight"), Tensor::randn(&[fan_in, fan_out], std, rng));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
}

/// Conv weights `[cout, cin, k, k]` with He-normal (fan-in) init.
pub(crate) fn init_conv<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut R,
) {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    store.insert(format!("{name}.weight"), Tensor::randn(&[cout, cin, k, k], std, rng));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

pub(crate) fn init_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) {
    store.insert(format!("{name}.gain"), Tensor::ones(&[c]));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[c]));
}

/// `x[T, in] · W + b`.
pub(crate) fn linear<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.get("weight")?)?;
    tape.add_bias(y, p.get("bias")?)
}

pub(crate) fn layer_norm<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, x: Var) -> Result<Var> {
    tape.layer_norm(x, p.get("gain")?, p.get("bias")?, NORM_EPS)
}

pub(crate) fn conv<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    x: Var,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Var> {
    tape.conv2d(x, p.get("weight")?, Some(p.get("bias")?), stride, padding, dilation)
}

/// Per-channel spatial normalization followed by ReLU.
pub(crate) fn norm_relu<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, x: Var) -> Result<Var> {
    let y = tape.channel_norm(x, p.get("gain")?, p.get("bias")?, NORM_EPS)?;
    tape.relu(y)
}
