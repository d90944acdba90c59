//! Run configuration: every tunable in one TOML document.
//!
//! `seed`, `q` and `fusion` live at the top level and are copied into the model and
//! training sections; setting them inside `[model]` or `[train]` is an error.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DEFAULT_SEGMENT_SECONDS;
use crate::error::{Error, Result};
use crate::frontend::AnalysisConfig;
use crate::loss::LossWeights;
use crate::nn::{FusionMode, ModelConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    /// Longest excerpt taken from each clean file.
    pub segment_seconds: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_manifest: None,
            val_manifest: None,
            segment_seconds: DEFAULT_SEGMENT_SECONDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub q: usize,
    pub fusion: FusionMode,
    pub stft: AnalysisConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            q: 3,
            fusion: FusionMode::R,
            stft: AnalysisConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        };
        cfg.sync();
        cfg
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub q: Option<usize>,
    pub fusion: Option<FusionMode>,
}

const SHARED: [(&str, &[&str]); 2] = [("model", &["q", "fusion"]), ("train", &["q", "fusion", "seed"])];

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (section, keys) in SHARED {
            if let Some(toml::Value::Table(t)) = table.get(section) {
                if let Some(k) = keys.iter().find(|k| t.contains_key(**k)) {
                    return Err(Error::Config(format!("set `{k}` at the top level, not in [{section}]")));
                }
            }
        }
        let mut cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a file; relative manifest paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train_manifest, &mut cfg.data.val_manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(q) = o.q {
            self.q = q;
        }
        if let Some(f) = o.fusion {
            self.fusion = f;
        }
        self.sync();
        self.validate()
    }

    fn sync(&mut self) {
        self.model.q = self.q;
        self.model.fusion = self.fusion;
        self.train.q = self.q;
        self.train.fusion = self.fusion;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate().map_err(|e| Error::Config(format!("stft: {e}")))?;
        if self.stft.bins() != self.model.bins {
            return Err(Error::Config(format!(
                "stft produces {} bins but the model expects {}",
                self.stft.bins(),
                self.model.bins
            )));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if !(self.data.segment_seconds > 0.0 && self.data.segment_seconds.is_finite()) {
            return Err(Error::Config(format!(
                "data.segment_seconds must be positive, got {}",
                self.data.segment_seconds
            )));
        }
        Ok(())
    }
}
