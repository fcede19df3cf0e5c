//! Finite-difference checks of every differentiable op and of the composed
//! encoder layer, decoder layer and conv head, all in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{head, transformer, BackboneConfig, HeadConfig, ModelConfig, ParamStore, ParamVars, SegModel};
use crate::tensor::{grad_check_many, Tape, Tensor, Var};

/// Largest accepted max relative error.
pub const THRESHOLD: f64 = 1e-4;

/// Central-difference step.
pub const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= THRESHOLD
    }
}

/// Width, heads and token count of the composite checks.
pub const TINY_EMBED: usize = 16;
pub const TINY_HEADS: usize = 2;
pub const TINY_TOKENS: usize = 16;

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    f: OpFn,
}

fn case(name: &'static str, shapes: &[&[usize]], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case { name, shapes: shapes.iter().map(|s| s.to_vec()).collect(), f: Box::new(f) }
}

/// Entries bounded away from zero so ReLU kinks stay outside the stencil.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// `sum(w ⊙ y)` with fixed random weights, turning any output into a scalar
/// whose gradient reaches every element.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::rand_uniform(tape.shape(y), -1.0, 1.0, &mut rng);
    let w = tape.constant(&w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn op_cases() -> Vec<Case> {
    vec![
        case("matmul", &[&[3, 4], &[4, 5]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 1)
        }),
        case("matmul_nt", &[&[3, 4], &[5, 4]], |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            weighted_sum(t, y, 2)
        }),
        case("transpose", &[&[3, 5]], |t, v| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y, 3)
        }),
        case("add", &[&[2, 3], &[2, 3]], |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, 4)
        }),
        case("sub", &[&[2, 3], &[2, 3]], |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, 5)
        }),
        case("mul", &[&[2, 3], &[2, 3]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, 6)
        }),
        case("scale", &[&[4]], |t, v| {
            let y = t.scale(v[0], -1.75)?;
            weighted_sum(t, y, 7)
        }),
        case("add_bias", &[&[3, 4], &[4]], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            weighted_sum(t, y, 8)
        }),
        case("relu", &[&[3, 4]], |t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y, 9)
        }),
        case("sum", &[&[2, 3]], |t, v| t.sum(v[0])),
        case("mean", &[&[2, 3]], |t, v| t.mean(v[0])),
        case("softmax_rows", &[&[3, 5]], |t, v| {
            let y = t.softmax(v[0], 1)?;
            weighted_sum(t, y, 10)
        }),
        case("softmax_axis0", &[&[2, 3, 4]], |t, v| {
            let y = t.softmax(v[0], 0)?;
            weighted_sum(t, y, 11)
        }),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, 12)
        }),
        case("channel_norm", &[&[3, 4, 5], &[3], &[3]], |t, v| {
            let y = t.channel_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, 13)
        }),
        case("conv2d", &[&[2, 5, 5], &[3, 2, 3, 3], &[3]], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1)?;
            weighted_sum(t, y, 14)
        }),
        case("conv2d_stride2", &[&[2, 6, 6], &[3, 2, 3, 3]], |t, v| {
            let y = t.conv2d(v[0], v[1], None, 2, 1, 1)?;
            weighted_sum(t, y, 15)
        }),
        case("conv2d_dilated", &[&[2, 6, 6], &[2, 2, 3, 3], &[2]], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 2, 2)?;
            weighted_sum(t, y, 16)
        }),
        case("conv2d_1x1", &[&[3, 4, 4], &[2, 3, 1, 1], &[2]], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 0, 1)?;
            weighted_sum(t, y, 17)
        }),
        case("bilinear_upsample", &[&[2, 3, 4]], |t, v| {
            let y = t.bilinear_upsample(v[0], 7, 9)?;
            weighted_sum(t, y, 18)
        }),
        case("reshape", &[&[2, 6]], |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            weighted_sum(t, y, 19)
        }),
        case("narrow", &[&[3, 5]], |t, v| {
            let y = t.narrow(v[0], 1, 1, 3)?;
            weighted_sum(t, y, 20)
        }),
        case("concat", &[&[2, 3], &[2, 2]], |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            weighted_sum(t, y, 21)
        }),
        case("cross_entropy", &[&[4, 6]], |t, v| t.cross_entropy(v[0], &[0, 3, 255, 1, 2, 2], 255)),
    ]
}

/// Random `f64` parameters for every name in `store`, with non-trivial
/// gains and biases.
fn perturbed(store: &ParamStore<f64>, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor<f64>)> {
    store
        .iter()
        .map(|(name, t)| {
            let mut t = t.clone();
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
            (name.to_string(), t)
        })
        .collect()
}

/// Checks `f(params, inputs)` w.r.t. every parameter and input together.
fn composite<F>(params: Vec<(String, Tensor<f64>)>, inputs: Vec<Tensor<f64>>, seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamVars, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let k = params.len();
    let mut all: Vec<Tensor<f64>> = params.into_iter().map(|(_, t)| t).collect();
    all.extend(inputs);
    grad_check_many(
        |tape, vars| {
            let pv = ParamVars::from_named(names.iter().cloned().zip(vars[..k].iter().copied()));
            let y = f(tape, &pv, &vars[k..])?;
            weighted_sum(tape, y, seed)
        },
        &all,
        STEP,
    )
}

/// Model config behind the composite checks: C=16, M=2, T=16 (64×64 input).
pub fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::new(TINY_EMBED, 1, TINY_HEADS, 2, 3, 64);
    cfg.backbone = BackboneConfig { stage_channels: [4, 4, 8, TINY_EMBED], last_stage_dilation: 2 };
    cfg.head = HeadConfig { hidden_channels: 4 };
    cfg
}

fn composite_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let cfg = tiny_config();
    let model = SegModel::<f64>::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let scoped = |prefix: &str, rng: &mut ChaCha8Rng| {
        let mut sub = ParamStore::default();
        for (name, t) in model.params.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                sub.insert(rest, t.clone());
            }
        }
        perturbed(&sub, rng)
    };
    let (c, t) = (TINY_EMBED, TINY_TOKENS);
    let mut out = Vec::new();

    let params = scoped("encoder.layer0.", &mut rng);
    let x = away_from_zero(&[t, c], &mut rng);
    let err = composite(params, vec![x], 31, |tape, p, v| transformer::encoder_layer(tape, p, v[0], TINY_HEADS))?;
    out.push(CheckResult { name: "encoder_layer".into(), max_rel_error: err });

    let params = scoped("decoder.layer0.", &mut rng);
    let protos = away_from_zero(&[cfg.num_classes, c], &mut rng);
    let enc = away_from_zero(&[t, c], &mut rng);
    let err = composite(params, vec![protos, enc], 32, |tape, p, v| {
        transformer::decoder_layer(tape, p, v[0], v[1], &cfg)
    })?;
    out.push(CheckResult { name: "decoder_layer".into(), max_rel_error: err });

    let params = scoped("decoder.", &mut rng);
    let enc = away_from_zero(&[t, c], &mut rng);
    let err = composite(params, vec![enc], 33, |tape, p, v| transformer::decoder_forward(tape, p, v[0], &cfg))?;
    out.push(CheckResult { name: "decoder_map".into(), max_rel_error: err });

    let params = scoped("head.", &mut rng);
    let attn = away_from_zero(&[cfg.num_classes, TINY_HEADS, t], &mut rng);
    let res2 = away_from_zero(&[cfg.backbone.res2_channels(), 16, 16], &mut rng);
    let err = composite(params, vec![attn, res2], 34, |tape, p, v| head::head_forward(tape, p, v[0], v[1], &cfg))?;
    out.push(CheckResult { name: "head".into(), max_rel_error: err });
    Ok(out)
}

/// Every op check followed by the composite checks, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for c in op_cases() {
        let inputs: Vec<Tensor<f64>> = c.shapes.iter().map(|s| away_from_zero(s, &mut rng)).collect();
        let err = grad_check_many(&c.f, &inputs, STEP)?;
        results.push(CheckResult { name: c.name.into(), max_rel_error: err });
    }
    results.extend(composite_checks(seed)?);
    Ok(results)
}

/// Names covered by [`run_all`].
pub fn check_names() -> Vec<String> {
    let mut names: Vec<String> = op_cases().iter().map(|c| c.name.to_string()).collect();
    names.extend(["encoder_layer", "decoder_layer", "decoder_map", "head"].map(String::from));
    names
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let results = run_all(0).unwrap();
        assert_eq!(results.iter().map(|r| r.name.clone()).collect::<Vec<_>>(), check_names());
        for r in &results {
            assert!(r.passed(), "{}: {:e}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // A function whose tape gradient is deliberately off: y = x·x recorded
        // as y = x·c with c a constant copy of x.
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = grad_check_many(
            |tape, v| {
                let c = tape.constant(&tape.tensor(v[0]));
                let y = tape.mul(v[0], c)?;
                tape.sum(y)
            },
            &[x],
            STEP,
        )
        .unwrap();
        assert!(err > THRESHOLD);
    }
}
