//! Four-stage convolutional feature extractor.
//!
//! Each stage is two `conv3x3 -> norm -> ReLU` blocks; the first conv of every
//! stage has stride 2, so stage outputs sit at strides 2, 4, 8 and 16. The
//! second conv of the last stage is dilated.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{conv, init_conv, init_norm, norm_relu};
use super::{ParamStore, ParamVars};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output width of stages 1..=4; the last must equal the embedding dim.
    pub stage_channels: [usize; 4],
    pub last_stage_dilation: usize,
}

impl BackboneConfig {
    pub fn for_embed_dim(c: usize) -> Self {
        BackboneConfig { stage_channels: [16, 32, 64, c], last_stage_dilation: 2 }
    }

    /// Width of the stride-4 feature handed to the conv head.
    pub fn res2_channels(&self) -> usize {
        self.stage_channels[1]
    }

    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.stage_channels.contains(&0) || self.last_stage_dilation == 0 {
            return Err(Error::Config("backbone widths and dilation must be positive".into()));
        }
        if self.stage_channels[3] != embed_dim {
            return Err(Error::Config(format!(
                "last backbone stage width {} must equal embed_dim {embed_dim}",
                self.stage_channels[3]
            )));
        }
        Ok(())
    }
}

pub(crate) fn init<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &BackboneConfig, rng: &mut R) {
    let mut cin = 3;
    for (s, &cout) in cfg.stage_channels.iter().enumerate() {
        let stage = format!("backbone.stage{}", s + 1);
        init_conv(store, &format!("{stage}.conv1"), cout, cin, 3, rng);
        init_norm(store, &format!("{stage}.norm1"), cout);
        init_conv(store, &format!("{stage}.conv2"), cout, cout, 3, rng);
        init_norm(store, &format!("{stage}.norm2"), cout);
        cin = cout;
    }
}

/// Returns `(F [C, H/16, W/16], Res2 [C2, H/4, W/4])`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    image: Var,
    cfg: &BackboneConfig,
) -> Result<(Var, Var)> {
    match tape.shape(image) {
        &[3, h, w] if h % 16 == 0 && w % 16 == 0 && h > 0 && w > 0 => {}
        s => return Err(Error::dim(format!("backbone needs a [3, H, W] image with H, W divisible by 16, got {s:?}"))),
    }
    let mut x = image;
    let mut res2 = None;
    for s in 0..4 {
        let p = vars.scope(&format!("stage{}", s + 1));
        let dilation = if s == 3 { cfg.last_stage_dilation } else { 1 };
        x = conv(tape, &p.scope("conv1"), x, 2, 1, 1)?;
        x = norm_relu(tape, &p.scope("norm1"), x)?;
        x = conv(tape, &p.scope("conv2"), x, 1, dilation, dilation)?;
        x = norm_relu(tape, &p.scope("norm2"), x)?;
        if s == 1 {
            res2 = Some(x);
        }
    }
    Ok((x, res2.expect("stage 2 always runs")))
}
