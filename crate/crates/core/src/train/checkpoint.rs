//! Checkpoints: weights and optimizer moments as safetensors, configuration and
//! progress as JSON header metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::optim::Adam;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::frontend::AnalysisConfig;
use crate::loss::LossWeights;
use crate::nn::{ModelConfig, Network};

pub const FORMAT: &str = "unfoldse-checkpoint";
pub const VERSION: u32 = 1;

const WEIGHT_PREFIX: &str = "weights.";
const OPTIM_PREFIX: &str = "optim.";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub best_val_loss: Option<f64>,
    /// Validation loss of every completed epoch; the schedule is replayed from it.
    pub val_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub analysis: AnalysisConfig,
    pub progress: Progress,
    pub weights: BTreeMap<String, Tensor>,
    pub optimizer_steps: u64,
    pub optimizer: BTreeMap<String, Tensor>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn capture(
        network: &Network,
        train: &TrainConfig,
        loss: &LossWeights,
        analysis: &AnalysisConfig,
        optimizer: Option<&Adam>,
        progress: Progress,
    ) -> Self {
        let weights = network
            .store()
            .vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().detach()))
            .collect();
        Self {
            model: network.config().clone(),
            train: train.clone(),
            loss: *loss,
            analysis: *analysis,
            progress,
            weights,
            optimizer_steps: optimizer.map_or(0, Adam::steps),
            optimizer: optimizer.map(Adam::state).unwrap_or_default(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fn json<T: Serialize>(path: &Path, v: &T) -> Result<String> {
            serde_json::to_string(v).map_err(|e| ckpt_err(path, e.to_string()))
        }
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert("version".to_string(), VERSION.to_string());
        meta.insert("model".to_string(), json(path, &self.model)?);
        meta.insert("train".to_string(), json(path, &self.train)?);
        meta.insert("loss".to_string(), json(path, &self.loss)?);
        meta.insert("stft".to_string(), json(path, &self.analysis)?);
        meta.insert("progress".to_string(), json(path, &self.progress)?);
        meta.insert("optimizer_steps".to_string(), self.optimizer_steps.to_string());
        let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(self.weights.len() + self.optimizer.len());
        for (k, t) in &self.weights {
            tensors.push((format!("{WEIGHT_PREFIX}{k}"), t.contiguous()?));
        }
        for (k, t) in &self.optimizer {
            tensors.push((format!("{OPTIM_PREFIX}{k}"), t.contiguous()?));
        }
        // Write beside the target, then rename, so an interrupted save never clobbers
        // the previous file.
        let tmp = path.with_extension("tmp");
        safetensors::serialize_to_file(tensors.iter().map(|(k, t)| (k.as_str(), t)), Some(meta), &tmp)
            .map_err(|e| ckpt_err(path, e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, format!("corrupt file: {e}")))?;
        let (_, header) =
            safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, format!("corrupt file: {e}")))?;
        let meta = header.metadata().clone().ok_or_else(|| ckpt_err(path, "missing metadata"))?;
        let field = |k: &str| meta.get(k).ok_or_else(|| ckpt_err(path, format!("missing metadata field {k}")));
        if field("format")? != FORMAT {
            return Err(ckpt_err(path, format!("not an {FORMAT} file")));
        }
        let version: u32 = field("version")?.parse().map_err(|_| ckpt_err(path, "unreadable version"))?;
        if version != VERSION {
            return Err(ckpt_err(path, format!("version {version} is not supported (expected {VERSION})")));
        }
        fn parse<T: serde::de::DeserializeOwned>(path: &Path, k: &str, s: &str) -> Result<T> {
            serde_json::from_str(s).map_err(|e| ckpt_err(path, format!("metadata field {k}: {e}")))
        }
        let mut weights = BTreeMap::new();
        let mut optimizer = BTreeMap::new();
        for (name, view) in st.tensors() {
            let t = view.load(&Device::Cpu).map_err(|e| ckpt_err(path, format!("tensor {name}: {e}")))?;
            if let Some(k) = name.strip_prefix(WEIGHT_PREFIX) {
                weights.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(OPTIM_PREFIX) {
                optimizer.insert(k.to_string(), t);
            } else {
                return Err(ckpt_err(path, format!("unexpected tensor {name}")));
            }
        }
        Ok(Self {
            model: parse(path, "model", field("model")?)?,
            train: parse(path, "train", field("train")?)?,
            loss: parse(path, "loss", field("loss")?)?,
            analysis: parse(path, "stft", field("stft")?)?,
            progress: parse(path, "progress", field("progress")?)?,
            optimizer_steps: parse(path, "optimizer_steps", field("optimizer_steps")?)?,
            weights,
            optimizer,
        })
    }

    /// Rebuilds the network with the stored weights.
    pub fn network(&self) -> Result<Network> {
        let net = Network::new(self.model.clone(), self.train.seed)?;
        net.store().assign(&self.weights)?;
        Ok(net)
    }

    /// Fails with the list of differing fields when `expected` disagrees with the stored
    /// model configuration.
    pub fn ensure_model(&self, expected: &ModelConfig) -> Result<()> {
        let diffs = config_diff(&self.model, expected)?;
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigMismatch(format!("checkpoint model differs: {}", diffs.join(", "))))
        }
    }

    /// Loads and checks against `expected` in one go.
    pub fn load_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<(Network, Self)> {
        let ckpt = Self::load(path)?;
        ckpt.ensure_model(expected)?;
        Ok((ckpt.network()?, ckpt))
    }
}

/// `field: stored X, requested Y` for every leaf that differs.
pub fn config_diff<T: Serialize>(stored: &T, requested: &T) -> Result<Vec<String>> {
    let a = serde_json::to_value(stored).map_err(|e| Error::Config(e.to_string()))?;
    let b = serde_json::to_value(requested).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    diff("", &a, &b, &mut out);
    Ok(out)
}

fn diff(prefix: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for (k, va) in x {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match y.get(k) {
                    Some(vb) => diff(&key, va, vb, out),
                    None => out.push(format!("{key}: stored {va}, requested nothing")),
                }
            }
        }
        _ if a != b => out.push(format!("{prefix}: stored {a}, requested {b}")),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::FusionMode;

    fn tiny() -> ModelConfig {
        ModelConfig {
            q: 1,
            fusion: FusionMode::A,
            estimator_width: 8,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_restores_every_weight_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.safetensors");
        let net = Network::new(tiny(), 7).unwrap();
        let eta = net.store().get("eta.values").unwrap();
        eta.set(&Tensor::new(&[0.011f32, 0.0093, 0.0101, 0.0099], &Device::Cpu).unwrap()).unwrap();
        let cfg = TrainConfig { q: 1, fusion: FusionMode::A, ..Default::default() };
        Checkpoint::capture(&net, &cfg, &LossWeights::default(), &AnalysisConfig::default(), None, Progress::default())
            .save(&p)
            .unwrap();
        let (back, ckpt) = Checkpoint::load_for(&p, &tiny()).unwrap();
        assert_eq!(ckpt.train, cfg);
        assert_eq!(back.eta().unwrap(), net.eta().unwrap());
        for (name, var) in net.store().vars() {
            let a: Vec<f32> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = back.store().get(&name).unwrap().as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn mismatch_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.safetensors");
        let net = Network::new(tiny(), 0).unwrap();
        let cfg = TrainConfig { q: 1, fusion: FusionMode::A, ..Default::default() };
        Checkpoint::capture(&net, &cfg, &LossWeights::default(), &AnalysisConfig::default(), None, Progress::default())
            .save(&p)
            .unwrap();
        let err = Checkpoint::load_for(&p, &ModelConfig { q: 2, ..tiny() }).err().unwrap();
        let msg = err.to_string();
        assert!(msg.contains("q: stored 1, requested 2"), "{msg}");
    }

    #[test]
    fn corrupt_and_foreign_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.safetensors");
        std::fs::write(&p, b"definitely not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Checkpoint { .. })));
        let t = Tensor::zeros(2, candle_core::DType::F32, &Device::Cpu).unwrap();
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert("version".to_string(), "99".to_string());
        safetensors::serialize_to_file([("weights.x", &t)], Some(meta), &p).unwrap();
        let msg = Checkpoint::load(&p).unwrap_err().to_string();
        assert!(msg.contains("version 99"), "{msg}");
    }
}
