//! Transformer encoder over backbone tokens and the class-prototype decoder.
//!
//! Layers are pre-norm: `x + Attn(LN(x))` then `x + FFN(LN(x))`. Decoder
//! layers cross-attend from the prototypes to the encoded tokens only; there
//! is no self-attention among prototypes.

use rand::Rng;

use super::layers::{init_linear, init_norm, layer_norm, linear};
use super::{DecoderStyle, ModelConfig, ParamStore, ParamVars};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Std of the learned positional embeddings and class prototypes at init.
pub const EMBED_INIT_STD: f64 = 0.02;

fn init_attention<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut R) {
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{name}.{proj}"), c, c, rng);
    }
}

fn init_block<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut R) {
    let c = cfg.embed_dim;
    init_norm(store, &format!("{name}.norm1"), c);
    init_attention(store, &format!("{name}.attn"), c, rng);
    init_norm(store, &format!("{name}.norm2"), c);
    init_linear(store, &format!("{name}.ffn.fc1"), c, c * cfg.mlp_ratio, rng);
    init_linear(store, &format!("{name}.ffn.fc2"), c * cfg.mlp_ratio, c, rng);
}

pub(crate) fn init_encoder<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) {
    store.insert("encoder.pos", Tensor::randn(&[cfg.tokens(), cfg.embed_dim], EMBED_INIT_STD, rng));
    for i in 0..cfg.enc_layers {
        init_block(store, &format!("encoder.layer{i}"), cfg, rng);
    }
    if cfg.enc_layers > 0 {
        init_norm(store, "encoder.norm", cfg.embed_dim);
    }
}

pub(crate) fn init_decoder<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) {
    store.insert("decoder.prototypes", Tensor::randn(&[cfg.num_classes, cfg.embed_dim], EMBED_INIT_STD, rng));
    if cfg.decoder_style == DecoderStyle::Projected {
        for i in 0..cfg.dec_layers {
            init_block(store, &format!("decoder.layer{i}"), cfg, rng);
        }
        init_norm(store, "decoder.map_norm", cfg.embed_dim);
    }
}

/// Per-head scaled dot products `(q Wq)_h (k Wk)_hᵀ / sqrt(C/M)`, each `[Tq, Tk]`.
pub fn attention_logits<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    q_in: Var,
    k_in: Var,
    heads: usize,
) -> Result<Vec<Var>> {
    let c = tape.shape(q_in)[1];
    if tape.shape(k_in).len() != 2 || tape.shape(k_in)[1] != c {
        return Err(Error::dim(format!(
            "attention query {:?} and key {:?} widths differ",
            tape.shape(q_in),
            tape.shape(k_in)
        )));
    }
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::dim(format!("width {c} is not divisible by {heads} heads")));
    }
    let q = linear(tape, &p.scope("q"), q_in)?;
    let k = linear(tape, &p.scope("k"), k_in)?;
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    (0..heads)
        .map(|h| {
            let qh = tape.narrow(q, 1, h * d, d)?;
            let kh = tape.narrow(k, 1, h * d, d)?;
            let s = tape.matmul_nt(qh, kh)?;
            tape.scale(s, scale)
        })
        .collect()
}

/// Multi-head scaled dot-product attention with learned Q/K/V/O projections.
///
/// Returns the projected output `[Tq, C]` and the post-softmax weights
/// `[M, Tq, Tk]`.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    q_in: Var,
    kv_in: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let logits = attention_logits(tape, p, q_in, kv_in, heads)?;
    let v = linear(tape, &p.scope("v"), kv_in)?;
    let c = tape.shape(v)[1];
    let d = c / heads;
    let (tq, tk) = (tape.shape(q_in)[0], tape.shape(kv_in)[0]);
    let mut mixed = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for (h, s) in logits.into_iter().enumerate() {
        let a = tape.softmax(s, 1)?;
        let vh = tape.narrow(v, 1, h * d, d)?;
        mixed.push(tape.matmul(a, vh)?);
        weights.push(tape.reshape(a, &[1, tq, tk])?);
    }
    let joined = tape.concat(&mixed, 1)?;
    let out = linear(tape, &p.scope("o"), joined)?;
    let weights = tape.concat(&weights, 0)?;
    Ok((out, weights))
}

fn feed_forward<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, x: Var) -> Result<Var> {
    let h = linear(tape, &p.scope("fc1"), x)?;
    let h = tape.relu(h)?;
    linear(tape, &p.scope("fc2"), h)
}

/// One pre-norm block: attention from `x` to `context` (or to itself), then FFN.
fn block<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, x: Var, context: Option<Var>, heads: usize) -> Result<Var> {
    let q = layer_norm(tape, &p.scope("norm1"), x)?;
    let (a, _) = multi_head_attention(tape, &p.scope("attn"), q, context.unwrap_or(q), heads)?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, &p.scope("norm2"), x)?;
    let f = feed_forward(tape, &p.scope("ffn"), h)?;
    tape.add(x, f)
}

/// One self-attention encoder layer on `x[T, C]`.
pub fn encoder_layer<T: Scalar>(tape: &mut Tape<T>, p: &ParamVars, x: Var, heads: usize) -> Result<Var> {
    block(tape, p, x, None, heads)
}

/// Flattens `F[C, h, w]` row-major into tokens, adds the positional
/// embedding and runs the encoder stack. Returns `F_e[T, C]`.
pub fn encoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    features: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let (c, h, w) = match tape.shape(features) {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::dim(format!("encoder expects [C, h, w] features, got {s:?}"))),
    };
    let pos = vars.get("pos")?;
    let (t, pc) = (tape.shape(pos)[0], tape.shape(pos)[1]);
    if h * w != t || c != pc {
        return Err(Error::dim(format!(
            "feature grid {h}x{w} ({} tokens of width {c}) does not match the positional embedding \
             ({t} tokens of width {pc}); inference must use the training input size",
            h * w
        )));
    }
    let flat = tape.reshape(features, &[c, t])?;
    let tokens = tape.transpose(flat)?;
    let mut x = tape.add(tokens, pos)?;
    for i in 0..cfg.enc_layers {
        x = encoder_layer(tape, &vars.scope(&format!("layer{i}")), x, cfg.heads)?;
    }
    if cfg.enc_layers > 0 {
        x = layer_norm(tape, &vars.scope("norm"), x)?;
    }
    Ok(x)
}

/// One prototype update: `prototypes[N, C]` attend to `encoded[T, C]`.
pub fn decoder_layer<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    prototypes: Var,
    encoded: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let (n, c) = (tape.shape(prototypes)[0], tape.shape(prototypes)[1]);
    if tape.shape(encoded).len() != 2 || tape.shape(encoded)[1] != c {
        return Err(Error::dim(format!(
            "prototypes [{n}, {c}] and encoded tokens {:?} have different widths",
            tape.shape(encoded)
        )));
    }
    match cfg.decoder_style {
        DecoderStyle::Projected => block(tape, p, prototypes, Some(encoded), cfg.heads),
        DecoderStyle::Literal => {
            let s = tape.matmul_nt(prototypes, encoded)?;
            let a = tape.softmax(s, 1)?;
            tape.matmul(a, encoded)
        }
    }
}

/// Runs the decoder stack from the learned prototypes and returns the
/// final per-head attention logits `[N, M, T]` (pre-softmax).
pub fn decoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    encoded: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let mut e = vars.get("prototypes")?;
    if cfg.dec_layers == 0 {
        return Err(Error::Config("decoder needs at least one layer".into()));
    }
    for i in 0..cfg.dec_layers {
        e = decoder_layer(tape, &vars.scope(&format!("layer{i}")), e, encoded, cfg)?;
    }
    let (n, t) = (tape.shape(e)[0], tape.shape(encoded)[0]);
    match cfg.decoder_style {
        DecoderStyle::Literal => {
            let s = tape.matmul_nt(e, encoded)?;
            tape.reshape(s, &[n, 1, t])
        }
        DecoderStyle::Projected => {
            let q = layer_norm(tape, &vars.scope("map_norm"), e)?;
            let last = vars.scope(&format!("layer{}", cfg.dec_layers - 1)).scope("attn");
            let heads = attention_logits(tape, &last, q, encoded, cfg.heads)?;
            let heads = heads.into_iter().map(|s| tape.reshape(s, &[n, 1, t])).collect::<Result<Vec<_>>>()?;
            tape.concat(&heads, 1)
        }
    }
}
