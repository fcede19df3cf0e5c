//! Run configuration files: TOML with `[model]`, `[train]` and `[data]`
//! sections. Every key is optional; unknown keys are rejected by name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, synth, Sample, TRANSPARENT_CATEGORIES};
use crate::error::{Error, Result};
use crate::model::{DecoderStyle, ModelConfig};
use crate::train::TrainConfig;

/// Overrides on top of the preset chosen by `train.scale`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_classes: Option<usize>,
    pub embed_dim: Option<usize>,
    pub enc_layers: Option<usize>,
    pub dec_layers: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub hidden_channels: Option<usize>,
    pub stage_channels: Option<[usize; 4]>,
    pub last_stage_dilation: Option<usize>,
    pub decoder_style: Option<DecoderStyle>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset root holding `train/`, `val/` and `test/` splits.
    pub root: Option<PathBuf>,
    /// Use the generated corpus instead of `root`.
    pub synth: bool,
    pub synth_seed: u64,
    pub synth_train: usize,
    pub synth_val: usize,
    /// Side of generated images; defaults to the training input size.
    pub synth_size: Option<usize>,
    /// Display names, one per class id.
    pub class_names: Option<Vec<String>>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: None,
            synth: false,
            synth_seed: 0,
            synth_train: 200,
            synth_val: 50,
            synth_size: None,
            class_names: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    /// Directory for checkpoints, logs and reports.
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSection::default(),
            train: TrainConfig::default(),
            data: DataSection::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Class count used when the config leaves it unset: background plus the
/// eleven transparent categories.
pub const DEFAULT_NUM_CLASSES: usize = 12;

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model_config()?.validate()?;
        if let Some(names) = &self.data.class_names {
            if names.len() != self.num_classes() {
                return Err(Error::Config(format!(
                    "{} class names for {} classes",
                    names.len(),
                    self.num_classes()
                )));
            }
        }
        if !self.data.synth && self.data.root.is_none() {
            return Err(Error::Config("set data.root or data.synth = true".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes.unwrap_or(DEFAULT_NUM_CLASSES)
    }

    /// The scale preset with every `[model]` override applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let mut cfg = self.train.model_config(self.num_classes());
        if let Some(c) = m.embed_dim {
            cfg.embed_dim = c;
            cfg.heads = (c / 64).max(1);
            cfg.backbone.stage_channels[3] = c;
        }
        if let Some(l) = m.enc_layers {
            cfg.enc_layers = l;
        }
        cfg.dec_layers = m.dec_layers.or(m.enc_layers).unwrap_or(cfg.dec_layers);
        if let Some(h) = m.heads {
            cfg.heads = h;
        }
        if let Some(r) = m.mlp_ratio {
            cfg.mlp_ratio = r;
        }
        if let Some(h) = m.hidden_channels {
            cfg.head.hidden_channels = h;
        }
        if let Some(s) = m.stage_channels {
            cfg.backbone.stage_channels = s;
        }
        if let Some(d) = m.last_stage_dilation {
            cfg.backbone.last_stage_dilation = d;
        }
        if let Some(s) = m.decoder_style {
            cfg.decoder_style = s;
        }
        Ok(cfg)
    }

    pub fn class_names(&self) -> Vec<String> {
        if let Some(names) = &self.data.class_names {
            return names.clone();
        }
        let n = self.num_classes();
        if self.data.synth {
            (0..n).map(|c| synth::class_name(c).to_string()).collect()
        } else if n == DEFAULT_NUM_CLASSES {
            std::iter::once("background").chain(TRANSPARENT_CATEGORIES).map(String::from).collect()
        } else {
            (0..n).map(|c| if c == 0 { "background".into() } else { format!("class{c}") }).collect()
        }
    }

    /// `(train, val)` samples: generated, or loaded from `root`.
    pub fn datasets(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let n = self.num_classes();
        if self.data.synth {
            let size = self.data.synth_size.unwrap_or(self.train.input_size);
            return synth::synth_splits(self.data.synth_seed, self.data.synth_train, self.data.synth_val, size, n);
        }
        let root = self.data.root.as_ref().ok_or_else(|| Error::Config("data.root is not set".into()))?;
        Ok((load_dataset(root, "train", n)?, load_dataset(root, "val", n)?))
    }

    /// One named split; generated corpora have `train` and `val` only.
    pub fn split(&self, name: &str) -> Result<Vec<Sample>> {
        if self.data.synth {
            let (train, val) = self.datasets()?;
            return match name {
                "train" => Ok(train),
                "val" => Ok(val),
                other => Err(Error::Config(format!("generated corpus has no `{other}` split"))),
            };
        }
        let root = self.data.root.as_ref().ok_or_else(|| Error::Config("data.root is not set".into()))?;
        load_dataset(root, name, self.num_classes())
    }
}
