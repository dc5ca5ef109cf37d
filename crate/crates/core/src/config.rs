//! TOML experiment configuration with `desk` and `full` presets.
//!
//! A file may set `preset = "full"`; every key it defines is then merged
//! over that preset, so a file only needs to list what it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InputSpec, ModelConfig};
use crate::synthetic::SyntheticSpec;
use crate::trainer::TrainerConfig;
use crate::wss::{default_grid, SegTrainConfig, SegmenterConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticData {
    /// Generator settings; `n_samples` is the training-set size.
    #[serde(flatten)]
    pub spec: SyntheticSpec,
    pub n_val: usize,
    pub n_test: usize,
    /// Seed of the generated images, shared by every training seed.
    pub data_seed: u64,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self { spec: SyntheticSpec::default(), n_val: 500, n_test: 500, data_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FolderData {
    pub path: PathBuf,
    #[serde(default = "default_extensions")]
    pub extensions: Vec<String>,
    /// Train/validation/test fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub data_seed: u64,
}

fn default_extensions() -> Vec<String> {
    ["png", "jpg", "jpeg", "bmp"].iter().map(|s| s.to_string()).collect()
}

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataConfig {
    Synthetic(SyntheticData),
    Folder(FolderData),
}

impl Default for DataConfig {
    fn default() -> Self {
        Self::Synthetic(SyntheticData::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WssConfig {
    pub enabled: bool,
    pub grid: Vec<f64>,
    pub segmenter: SegTrainConfig,
    /// Attention maps and masks written as PNG for at most this many
    /// validation images.
    pub export_limit: usize,
}

impl Default for WssConfig {
    fn default() -> Self {
        Self { enabled: true, grid: default_grid(), segmenter: SegTrainConfig::default(), export_limit: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub preset: String,
    pub name: String,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub wss: WssConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// CPU-sized run: 64×64 inputs, 60 epochs, d = 32, a two-level
    /// segmenter of base width 4 trained for 5 epochs.
    pub fn desk() -> Self {
        let trainer = TrainerConfig::desk();
        let mut wss = WssConfig::default();
        wss.segmenter.epochs = 5;
        wss.segmenter.network = SegmenterConfig { base_width: 4, depth: 2, ..SegmenterConfig::default() };
        Self {
            preset: "desk".into(),
            name: "experiment".into(),
            out_dir: PathBuf::from("runs"),
            seeds: vec![0, 1, 2],
            data: DataConfig::default(),
            model: ModelConfig { embedding_dim: trainer.embedding_dim, ..ModelConfig::default() },
            trainer,
            wss,
        }
    }

    /// Full-scale hyperparameters: 224×224 inputs, 300 epochs, d = 128,
    /// a segmenter with base width 32.
    pub fn full() -> Self {
        let trainer = TrainerConfig::full();
        let mut c = Self::desk();
        c.preset = "full".into();
        c.model = ModelConfig { input: InputSpec::square(3, 224), embedding_dim: trainer.embedding_dim, ..ModelConfig::default() };
        c.trainer = trainer;
        c.wss.segmenter = SegTrainConfig { lr: 1e-4, network: SegmenterConfig { base_width: 32, ..SegmenterConfig::default() }, ..SegTrainConfig::default() };
        if let DataConfig::Synthetic(s) = &mut c.data {
            s.spec.image_size = 224;
        }
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            o => Err(Error::Config(format!("unknown preset {o:?} (expected desk or full)"))),
        }
    }

    /// Parses TOML text, merging it over the preset it names.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = match file.get("preset") {
            None => "desk",
            Some(toml::Value::String(s)) => s.as_str(),
            Some(_) => return Err(Error::Config("preset must be a string".into())),
        };
        let base = toml::Value::try_from(Self::preset(preset)?).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = base;
        merge(&mut merged, toml::Value::Table(file));
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        self.trainer.validate()?;
        if self.model.embedding_dim != self.trainer.embedding_dim {
            return Err(Error::Config(format!(
                "model.embedding_dim ({}) differs from trainer.embedding_dim ({})",
                self.model.embedding_dim, self.trainer.embedding_dim
            )));
        }
        match &self.data {
            DataConfig::Synthetic(s) => {
                s.spec.validate()?;
                let m = &self.model.input;
                if (m.channels, m.height, m.width) != (3, s.spec.image_size, s.spec.image_size) {
                    return Err(Error::Config("synthetic image_size must match model.input".into()));
                }
                if s.n_val < 2 || s.n_test < 2 {
                    return Err(Error::Config("n_val and n_test must be at least 2".into()));
                }
            }
            DataConfig::Folder(f) => {
                if f.split.iter().any(|x| *x < 0.0) || (f.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::Config("split fractions must be non-negative and sum to 1".into()));
                }
                if f.extensions.is_empty() {
                    return Err(Error::Config("extensions must not be empty".into()));
                }
            }
        }
        if self.wss.enabled {
            if self.wss.grid.is_empty() || self.wss.grid.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
                return Err(Error::Config("wss.grid needs values in (0,1)".into()));
            }
            if self.wss.segmenter.network.in_channels != self.model.input.channels {
                return Err(Error::Config("segmenter channels must match the input".into()));
            }
        }
        Ok(())
    }
}

/// Recursively overlays `top` onto `base` (tables merge, everything else
/// replaces).
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
