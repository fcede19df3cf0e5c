//! Trains one variant on the toy corpus and prints the log, per-class IoU
//! and the validation confusion matrix.
//!
//! `cargo run --release --example toy -- [variant] [seed]`

use std::time::Instant;

use t2seg::data::synth::synth_splits;
use t2seg::model::{SegModel, Variant};
use t2seg::par::Exec;
use t2seg::train::{evaluate, train, TrainConfig, TrainOptions};

fn main() -> t2seg::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let variant = args.get(1).and_then(|s| Variant::parse(s)).unwrap_or(Variant::Full);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let n = 6;
    let (train_set, val_set) = synth_splits(0, 200, 50, 64, n)?;
    let cfg = TrainConfig { lr: 1e-3, variant, seed, ..TrainConfig::default() };
    let mut model = SegModel::new(cfg.model_config(n), seed)?;
    println!("params {} MACs {}", model.param_count(), model.mac_count()?);
    let start = Instant::now();
    let mut out = std::io::stdout();
    train(&mut model, &train_set, &val_set, &cfg, TrainOptions { log: Some(&mut out), ..Default::default() })?;
    let train_cm = evaluate(&model, &train_set, Exec::default())?;
    let cm = evaluate(&model, &val_set, Exec::default())?;
    println!("train mIoU {:.4} ACC {:.4}", train_cm.miou()?, train_cm.pixel_accuracy()?);
    println!("val IoU per class {:?}", cm.iou_per_class());
    for t in 0..n {
        println!("{:?}", (0..n).map(|p| cm.get(t, p)).collect::<Vec<_>>());
    }
    println!("val mIoU {:.4} ACC {:.4} in {:.1}s", cm.miou()?, cm.pixel_accuracy()?, start.elapsed().as_secs_f64());
    Ok(())
}
