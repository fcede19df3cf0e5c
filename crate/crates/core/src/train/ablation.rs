//! Variant/scale/seed grids trained and evaluated on the same corpus.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{evaluate, train, TrainConfig, TrainOptions};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{Scale, SegModel, Variant};
use crate::par::Exec;

/// One trained configuration and its scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub scale: Scale,
    pub seed: u64,
    pub miou: f64,
    pub acc: f64,
    pub param_count: usize,
    pub mac_count: u64,
}

/// Trains each `(variant, scale, seed)` with `base` otherwise and scores it
/// on `val`. The seed drives both initialization and sample order.
pub fn ablation_run(
    grid: &[(Variant, Scale, u64)],
    train_set: &[Sample],
    val_set: &[Sample],
    num_classes: usize,
    base: &TrainConfig,
    exec: Exec,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Data("ablation needs a validation split".into()));
    }
    grid.iter()
        .map(|&(variant, scale, seed)| {
            let cfg = TrainConfig { variant, scale, seed, ..base.clone() };
            let mut model = SegModel::new(cfg.model_config(num_classes), seed)?;
            train(&mut model, train_set, val_set, &cfg, TrainOptions { exec, ..Default::default() })?;
            let cm = evaluate(&model, val_set, exec)?;
            Ok(AblationRow {
                variant,
                scale,
                seed,
                miou: cm.miou()?,
                acc: cm.pixel_accuracy()?,
                param_count: model.param_count(),
                mac_count: model.mac_count()?,
            })
        })
        .collect()
}

/// Header `variant,scale,seed,miou,acc,param_count,mac_count`; scores with
/// 4 decimals.
pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "scale", "seed", "miou", "acc", "param_count", "mac_count"])?;
    for r in rows {
        w.write_record([
            r.variant.name().to_string(),
            r.scale.name().to_string(),
            r.seed.to_string(),
            format!("{:.4}", r.miou),
            format!("{:.4}", r.acc),
            r.param_count.to_string(),
            r.mac_count.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("ablation csv", e))?;
    Ok(())
}

/// Parses CSV written by [`write_ablation_csv`].
pub fn read_ablation_csv<R: std::io::Read>(input: R) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
