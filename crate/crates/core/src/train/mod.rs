//! Optimization loop, evaluation, checkpoints and the ablation harness.

pub mod ablation;
pub mod adam;
pub mod checkpoint;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ConfusionMatrix, Sample};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Scale, SegModel, Variant};
use crate::par::Exec;
use crate::tensor::Tape;

pub use ablation::{ablation_run, read_ablation_csv, write_ablation_csv, AblationRow};
pub use adam::{adam_step, poly_lr, AdamParams, Moments};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub poly_power: f64,
    pub seed: u64,
    pub input_size: usize,
    pub variant: Variant,
    pub scale: Scale,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            batch_size: 4,
            epochs: 50,
            poly_power: 0.9,
            seed: 0,
            input_size: 64,
            variant: Variant::Full,
            scale: Scale::Small,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        let invalid = |v: f64, zero_ok: bool| v.is_nan() || v < 0.0 || (!zero_ok && v == 0.0);
        if invalid(self.adam_eps, false) || invalid(self.weight_decay, true) || invalid(self.poly_power, true) {
            return bad("adam_eps must be positive; weight_decay and poly_power non-negative");
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return Err(Error::Config(format!("input_size {} is not a positive multiple of 16", self.input_size)));
        }
        Ok(())
    }

    /// Model preset for this run's scale and variant.
    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig::for_scale(self.scale, num_classes, self.input_size).with_variant(self.variant)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    pub mean_loss: f64,
    /// `None` without a validation split.
    pub val_miou: Option<f64>,
}

impl EpochLog {
    /// `epoch \t lr \t mean_loss \t val_mIoU`.
    pub fn line(&self) -> String {
        let miou = self.val_miou.map_or_else(|| "nan".to_string(), |m| format!("{m:.4}"));
        format!("{}\t{:.6e}\t{:.6}\t{}", self.epoch, self.lr, self.mean_loss, miou)
    }
}

/// Where and how a run reports progress.
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub exec: Exec,
    /// Receives `epoch_NNN.t2sg` after every epoch and `final.t2sg`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Receives each log line as soon as its epoch ends.
    pub log: Option<&'a mut dyn Write>,
}

/// Per-parameter optimizer state, in the model's name order.
struct Optimizer {
    moments: Vec<Moments<f32>>,
    step: u64,
    hp: AdamParams,
}

impl Optimizer {
    fn new(model: &SegModel<f32>, cfg: &TrainConfig) -> Self {
        let moments = model.params.iter().map(|(_, t)| Moments::zeros(t.numel())).collect();
        Optimizer { moments, step: 0, hp: AdamParams { eps: cfg.adam_eps, weight_decay: cfg.weight_decay } }
    }

    fn apply(&mut self, model: &mut SegModel<f32>, grads: &[Vec<f32>], lr: f64) -> Result<()> {
        self.step += 1;
        for (((_, p), g), m) in model.params.iter_mut().zip(grads).zip(&mut self.moments) {
            adam_step(p.data_mut(), g, m, self.step, lr, self.hp)?;
        }
        Ok(())
    }
}

/// Loss and parameter gradients (name order) for one sample.
pub fn sample_gradients(model: &SegModel<f32>, sample: &Sample) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let x = tape.constant(&sample.image);
    let loss = model.loss(&mut tape, &vars, x, &sample.mask)?;
    let value = tape.value(loss)[0];
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    tape.backward(loss)?;
    let grads = vars
        .all()
        .map(|(name, v)| {
            let g = tape.grad(v).ok_or_else(|| Error::Checkpoint(format!("no gradient for `{name}`")))?;
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            Ok(g.to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((value as f64, grads))
}

/// Mean loss and mean gradients over a batch, reduced in batch order.
fn batch_gradients(model: &SegModel<f32>, batch: &[&Sample], exec: Exec) -> Result<(f64, Vec<Vec<f32>>)> {
    let results = exec.map(batch, |s| sample_gradients(model, s));
    let mut total_loss = 0.0;
    let mut sum: Option<Vec<Vec<f32>>> = None;
    for r in results {
        let (loss, grads) = r?;
        total_loss += loss;
        match sum.as_mut() {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let mut grads = sum.ok_or_else(|| Error::Data("empty batch".into()))?;
    let scale = 1.0 / batch.len() as f32;
    grads.iter_mut().flatten().for_each(|g| *g *= scale);
    Ok((total_loss / batch.len() as f64, grads))
}

/// Resizes every sample to the model's input side.
pub fn prepare(samples: &[Sample], input_size: usize, exec: Exec) -> Vec<Sample> {
    exec.map(samples, |s| s.resized(input_size))
}

/// Trains `model` in place; returns one log entry per epoch.
///
/// Samples are visited in a per-epoch shuffled order drawn from `cfg.seed`;
/// the learning rate follows the poly schedule over all steps.
pub fn train(
    model: &mut SegModel<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let size = model.config.input_size;
    let train_set = prepare(train_set, size, opts.exec);
    let val_set = prepare(val_set, size, opts.exec);
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let max_iter = (steps_per_epoch * cfg.epochs) as u64;
    let mut optimizer = Optimizer::new(model, cfg);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let first_lr = poly_lr(cfg.lr, optimizer.step, max_iter, cfg.poly_power);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let lr = poly_lr(cfg.lr, optimizer.step, max_iter, cfg.poly_power);
            let (loss, grads) = batch_gradients(model, &batch, opts.exec)?;
            optimizer.apply(model, &grads, lr)?;
            loss_sum += loss * batch.len() as f64;
        }

        let val_miou = if val_set.is_empty() { None } else { Some(evaluate(model, &val_set, opts.exec)?.miou()?) };
        let entry = EpochLog { epoch, lr: first_lr, mean_loss: loss_sum / train_set.len() as f64, val_miou };
        if let Some(w) = opts.log.as_mut() {
            writeln!(w, "{}", entry.line()).map_err(|e| Error::io("training log", e))?;
        }
        if let Some(dir) = &opts.checkpoint_dir {
            checkpoint::save(&model.params, &dir.join(format!("epoch_{epoch:03}.t2sg")))?;
        }
        logs.push(entry);
    }
    if let Some(dir) = &opts.checkpoint_dir {
        checkpoint::save(&model.params, &dir.join("final.t2sg"))?;
    }
    Ok(logs)
}

/// Confusion matrix of full-resolution predictions over `samples`.
pub fn evaluate(model: &SegModel<f32>, samples: &[Sample], exec: Exec) -> Result<ConfusionMatrix> {
    let n = model.config.num_classes;
    let size = model.config.input_size;
    let per_image = exec.map(samples, |s| -> Result<ConfusionMatrix> {
        let s = s.resized(size);
        let pred = model.predict(&s.image)?;
        let mut cm = ConfusionMatrix::new(n);
        cm.accumulate(&pred, &s.mask)?;
        Ok(cm)
    });
    let mut total = ConfusionMatrix::new(n);
    for cm in per_image {
        total.merge(&cm?)?;
    }
    Ok(total)
}

/// Loads parameters saved by [`train`] into a model of `config`.
pub fn load_model(config: ModelConfig, path: &Path) -> Result<SegModel<f32>> {
    SegModel::from_params(config, checkpoint::load(path)?)
}
