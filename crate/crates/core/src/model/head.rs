//! Small conv head fusing decoder attention maps with the stride-4 feature,
//! the FCN-style classifier used by the ablation variants, and argmax
//! mask prediction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{conv, init_conv, init_norm, norm_relu};
use super::{ModelConfig, ParamStore, ParamVars};
use crate::data::MaskImage;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden_channels: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { hidden_channels: 64 }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels == 0 {
            return Err(Error::Config("head hidden_channels must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) fn init_head<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) {
    let hidden = cfg.head.hidden_channels;
    let fused = cfg.map_heads() + cfg.backbone.res2_channels();
    init_conv(store, "head.conv1", hidden, fused, 3, rng);
    init_norm(store, "head.norm1", hidden);
    init_conv(store, "head.conv2", 1, hidden, 3, rng);
}

pub(crate) fn init_fcn_head<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) {
    let hidden = cfg.head.hidden_channels;
    init_conv(store, "fcn_head.conv1", hidden, cfg.embed_dim, 3, rng);
    init_norm(store, "fcn_head.norm1", hidden);
    init_conv(store, "fcn_head.conv2", cfg.num_classes, hidden, 1, rng);
}

/// Turns `attn[N, M, T]` and `res2[C2, H/4, W/4]` into `logits[N, H/4, W/4]`.
///
/// Each class map is upsampled to the Res2 grid, concatenated with Res2
/// along channels and passed through one shared two-conv stack. The first
/// conv is evaluated split along its input channels: the Res2 half is the
/// same for every class and is computed once.
pub fn head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    attn: Var,
    res2: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let (n, m, t) = match tape.shape(attn) {
        &[n, m, t] => (n, m, t),
        s => return Err(Error::dim(format!("head expects attention [N, M, T], got {s:?}"))),
    };
    let (c2, rh, rw) = match tape.shape(res2) {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::dim(format!("head expects Res2 [C2, h, w], got {s:?}"))),
    };
    let grid = cfg.grid();
    if t != grid * grid {
        return Err(Error::dim(format!("attention has {t} tokens, expected {grid}x{grid}")));
    }
    if (rh, rw) != (4 * grid, 4 * grid) {
        return Err(Error::dim(format!(
            "upsampled attention {0}x{0} does not match Res2 {rh}x{rw}",
            4 * grid
        )));
    }
    let w1 = p.get("conv1.weight")?;
    if tape.shape(w1)[1] != m + c2 {
        return Err(Error::dim(format!(
            "head conv expects {} fused channels, got {m} heads + {c2} Res2 channels",
            tape.shape(w1)[1]
        )));
    }
    let w_attn = tape.narrow(w1, 1, 0, m)?;
    let w_res2 = tape.narrow(w1, 1, m, c2)?;
    let shared = tape.conv2d(res2, w_res2, Some(p.get("conv1.bias")?), 1, 1, 1)?;

    let maps = tape.reshape(attn, &[n, m, grid, grid])?;
    let mut per_class = Vec::with_capacity(n);
    for class in 0..n {
        let a = tape.narrow(maps, 0, class, 1)?;
        let a = tape.reshape(a, &[m, grid, grid])?;
        let a = tape.bilinear_upsample(a, rh, rw)?;
        let a = tape.conv2d(a, w_attn, None, 1, 1, 1)?;
        let h = tape.add(a, shared)?;
        let h = norm_relu(tape, &p.scope("norm1"), h)?;
        per_class.push(conv(tape, &p.scope("conv2"), h, 1, 1, 1)?);
    }
    tape.concat(&per_class, 0)
}

/// Convolutional classifier on a stride-16 map `[C, h, w]`, bilinearly
/// upsampled to `[N, out_size, out_size]`.
pub fn fcn_head_forward<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, map: Var, out_size: usize) -> Result<Var> {
    let h = conv(tape, &p.scope("conv1"), map, 1, 1, 1)?;
    let h = norm_relu(tape, &p.scope("norm1"), h)?;
    let logits = conv(tape, &p.scope("conv2"), h, 1, 0, 1)?;
    tape.bilinear_upsample(logits, out_size, out_size)
}

/// Upsamples `logits[N, h, w]` to `height x width` and takes the per-pixel
/// argmax; ties go to the lowest class id.
pub fn predict_mask<T: Scalar>(logits: &Tensor<T>, height: usize, width: usize) -> Result<MaskImage> {
    let (n, h, w) = match logits.shape() {
        &[n, h, w] => (n, h, w),
        s => return Err(Error::dim(format!("predict_mask expects [N, h, w] logits, got {s:?}"))),
    };
    if n > 255 {
        return Err(Error::dim(format!("{n} classes do not fit 8-bit masks")));
    }
    if height < h || width < w {
        return Err(Error::dim(format!("cannot predict a {height}x{width} mask from {h}x{w} logits")));
    }
    let up = kernels::bilinear_forward(logits.data(), n, h, w, height, width);
    let plane = height * width;
    let labels = (0..plane)
        .map(|px| {
            let mut best = 0;
            for c in 1..n {
                if up[c * plane + px] > up[best * plane + px] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    MaskImage::new(width, height, labels)
}
