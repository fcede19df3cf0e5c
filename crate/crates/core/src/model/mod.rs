//! The segmentation network: CNN backbone, transformer encoder, class-prototype
//! decoder and the small conv head, plus the CNN-decoder ablation variants.

pub mod backbone;
pub mod head;
mod layers;
mod params;
pub mod transformer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MaskImage;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub use backbone::BackboneConfig;
pub use head::HeadConfig;
pub use params::{ParamStore, ParamVars};

/// Epsilon shared by every normalization layer.
pub const NORM_EPS: f64 = 1e-5;

/// Which decoder sits on top of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Encoder, prototype decoder and small conv head.
    Full,
    /// Encoder followed by a convolutional classifier.
    NoDec,
    /// Backbone followed by a convolutional classifier (FCN-style baseline).
    NoEncDec,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoDec, Variant::NoEncDec];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDec => "no_dec",
            Variant::NoEncDec => "no_enc_dec",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn has_encoder(self) -> bool {
        self != Variant::NoEncDec
    }

    pub fn has_decoder(self) -> bool {
        self == Variant::Full
    }
}

/// Transformer size presets: (embedding dim, layers, mlp ratio).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Small,
    Medium,
    Large,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Small, Scale::Medium, Scale::Large];

    /// `(embed_dim, layers, mlp_ratio)`.
    pub fn triple(self) -> (usize, usize, usize) {
        match self {
            Scale::Small => (128, 1, 2),
            Scale::Medium => (256, 4, 3),
            Scale::Large => (768, 12, 4),
        }
    }

    /// Head count giving 64-wide heads.
    pub fn heads(self) -> usize {
        self.triple().0 / 64
    }

    pub fn name(self) -> &'static str {
        match self {
            Scale::Small => "small",
            Scale::Medium => "medium",
            Scale::Large => "large",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// How decoder layers update the class prototypes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderStyle {
    /// Pre-norm multi-head cross-attention with learned projections and an
    /// FFN, both residual.
    Projected,
    /// Bare `E <- softmax(E·F_eᵀ)·F_e` updates and an `E·F_eᵀ` map; single
    /// head, no parameters besides the prototypes.
    Literal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Category count including background (class 0).
    pub num_classes: usize,
    /// Square input side; must be divisible by 16.
    pub input_size: usize,
    pub variant: Variant,
    pub decoder_style: DecoderStyle,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn for_scale(scale: Scale, num_classes: usize, input_size: usize) -> Self {
        let (c, layers, mlp) = scale.triple();
        Self::new(c, layers, scale.heads(), mlp, num_classes, input_size)
    }

    pub fn new(
        embed_dim: usize,
        layers: usize,
        heads: usize,
        mlp_ratio: usize,
        num_classes: usize,
        input_size: usize,
    ) -> Self {
        ModelConfig {
            embed_dim,
            enc_layers: layers,
            dec_layers: layers,
            heads,
            mlp_ratio,
            num_classes,
            input_size,
            variant: Variant::Full,
            decoder_style: DecoderStyle::Projected,
            backbone: BackboneConfig::for_embed_dim(embed_dim),
            head: HeadConfig::default(),
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Side of the stride-16 token grid.
    pub fn grid(&self) -> usize {
        self.input_size / 16
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Heads as seen by the conv head (1 for the literal decoder).
    pub fn map_heads(&self) -> usize {
        match self.decoder_style {
            DecoderStyle::Projected => self.heads,
            DecoderStyle::Literal => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("embed_dim, heads and mlp_ratio must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!("embed_dim {} is not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.num_classes > 255 {
            return bad("num_classes must leave 255 free as the ignore label".into());
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return bad(format!("input_size {} is not a positive multiple of 16", self.input_size));
        }
        if self.variant.has_decoder() && self.dec_layers == 0 {
            return bad("the prototype decoder needs at least one layer".into());
        }
        if self.decoder_style == DecoderStyle::Literal && self.heads != 1 {
            return bad("the literal decoder is single-head".into());
        }
        self.backbone.validate(self.embed_dim)?;
        self.head.validate()
    }
}

/// Intermediate and final outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutputs {
    /// Stride-16 backbone feature `[C, H/16, W/16]`.
    pub features: Var,
    /// Stride-4 backbone feature `[C2, H/4, W/4]`.
    pub res2: Var,
    /// Encoded tokens `[T, C]`.
    pub encoded: Option<Var>,
    /// Decoder attention map `[N, M, T]`.
    pub attention: Option<Var>,
    /// Class scores `[N, H/4, W/4]`.
    pub logits: Var,
}

/// A configured network and its named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> SegModel<T> {
    /// Freshly initialized parameters, deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        backbone::init(&mut params, &config.backbone, &mut rng);
        if config.variant.has_encoder() {
            transformer::init_encoder(&mut params, &config, &mut rng);
        }
        if config.variant.has_decoder() {
            transformer::init_decoder(&mut params, &config, &mut rng);
            head::init_head(&mut params, &config, &mut rng);
        } else {
            head::init_fcn_head(&mut params, &config, &mut rng);
        }
        Ok(SegModel { config, params })
    }

    /// Wraps loaded parameters after checking names and shapes against a
    /// fresh model of the same config.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = SegModel::<T>::new(config, 0)?;
        reference.params.check_compatible(&params)?;
        Ok(SegModel { config: reference.config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Records every parameter as a leaf, tracking gradients iff `track`.
    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> ParamVars {
        self.params.bind(tape, track)
    }

    /// Full forward pass on one image `[3, H, W]`.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &ParamVars, image: Var) -> Result<ForwardOutputs> {
        let cfg = &self.config;
        match tape.shape(image) {
            &[3, h, w] if h == cfg.input_size && w == cfg.input_size => {}
            s => {
                return Err(Error::dim(format!(
                    "model expects a [3, {0}, {0}] image, got {s:?}",
                    cfg.input_size
                )))
            }
        }
        tape.set_scope("backbone");
        let (features, res2) = backbone::forward(tape, &vars.scope("backbone"), image, &cfg.backbone)?;

        let encoded = if cfg.variant.has_encoder() {
            tape.set_scope("encoder");
            Some(transformer::encoder_forward(tape, &vars.scope("encoder"), features, cfg)?)
        } else {
            None
        };

        let quarter = cfg.input_size / 4;
        let (attention, logits) = match (cfg.variant, encoded) {
            (Variant::Full, Some(enc)) => {
                tape.set_scope("decoder");
                let attn = transformer::decoder_forward(tape, &vars.scope("decoder"), enc, cfg)?;
                tape.set_scope("head");
                let logits = head::head_forward(tape, &vars.scope("head"), attn, res2, cfg)?;
                (Some(attn), logits)
            }
            (_, enc) => {
                tape.set_scope("head");
                let map = match enc {
                    Some(e) => {
                        let t = tape.transpose(e)?;
                        tape.reshape(t, &[cfg.embed_dim, cfg.grid(), cfg.grid()])?
                    }
                    None => features,
                };
                let logits = head::fcn_head_forward(tape, &vars.scope("fcn_head"), map, quarter)?;
                (None, logits)
            }
        };
        tape.set_scope("");
        Ok(ForwardOutputs { features, res2, encoded, attention, logits })
    }

    /// Class scores `[N, H/4, W/4]` for one image, without gradient tracking.
    pub fn logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(image);
        let out = self.forward(&mut tape, &vars, x)?;
        Ok(tape.tensor(out.logits))
    }

    /// Per-pixel class prediction at the input resolution.
    pub fn predict(&self, image: &Tensor<T>) -> Result<MaskImage> {
        let logits = self.logits(image)?;
        head::predict_mask(&logits, self.config.input_size, self.config.input_size)
    }

    /// Mean cross-entropy of one sample against its full-resolution mask
    /// (255 = ignore). Logits are bilinearly upsampled to the input size
    /// first, the same path [`SegModel::predict`] takes.
    pub fn loss(&self, tape: &mut Tape<T>, vars: &ParamVars, image: Var, target: &MaskImage) -> Result<Var> {
        let out = self.forward(tape, vars, image)?;
        let (n, s) = (self.config.num_classes, self.config.input_size);
        if (target.width(), target.height()) != (s, s) {
            return Err(Error::dim(format!(
                "target mask is {}x{}, model input is {s}x{s}",
                target.width(),
                target.height()
            )));
        }
        let up = tape.bilinear_upsample(out.logits, s, s)?;
        let flat = tape.reshape(up, &[n, s * s])?;
        tape.cross_entropy(flat, &target.targets(), crate::data::IGNORE as usize)
    }

    /// Multiply-accumulates of one forward pass, per module.
    pub fn mac_counts(&self) -> Result<Vec<(String, u64)>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let s = self.config.input_size;
        let x = tape.input(Tensor::zeros(&[3, s, s]));
        self.forward(&mut tape, &vars, x)?;
        Ok(tape.macs_by_scope())
    }

    pub fn mac_count(&self) -> Result<u64> {
        Ok(self.mac_counts()?.iter().map(|(_, m)| m).sum())
    }

    /// Parameter counts grouped by the first component of their names.
    pub fn param_counts(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.params.iter() {
            let module = name.split('.').next().unwrap_or(name);
            match out.iter_mut().find(|(m, _)| m == module) {
                Some((_, n)) => *n += t.numel(),
                None => out.push((module.to_string(), t.numel())),
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> SegModel<U> {
        SegModel { config: self.config.clone(), params: self.params.cast() }
    }
}
