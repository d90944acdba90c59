//! Optimization loop, validation, checkpoints.

pub mod checkpoint;
pub mod evaluate;
pub mod optim;
pub mod schedule;
pub mod trainer;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::FusionMode;

pub use checkpoint::{config_diff, Checkpoint, Progress};
pub use evaluate::{enhance_waveform, evaluate_dataset, validate, Validation};
pub use optim::{Adam, AdamConfig, StepStats};
pub use schedule::Plateau;
pub use trainer::{param_group, FitOutcome, StepReport, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Epochs without validation improvement before the rate is reduced.
    pub plateau_patience: usize,
    pub lr_factor: f64,
    /// Global gradient-norm limit; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub q: usize,
    pub fusion: FusionMode,
    /// Stop after this many optimizer steps; `0` means no limit.
    pub max_steps: usize,
    /// Batches synthesized ahead of the optimizer.
    pub prefetch: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            lr: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            plateau_patience: 2,
            lr_factor: 0.5,
            grad_clip: 5.0,
            seed: 0,
            q: 3,
            fusion: FusionMode::R,
            max_steps: 0,
            prefetch: 2,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
            ("plateau_patience", self.plateau_patience as f64),
            ("lr_factor", self.lr_factor),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("train.{name} must be positive, got {v}")));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.lr_factor >= 1.0 {
            return Err(Error::Config(format!("train.lr_factor must be below 1, got {}", self.lr_factor)));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config(format!("train.grad_clip must be non-negative, got {}", self.grad_clip)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn clip(&self) -> Option<f64> {
        (self.grad_clip > 0.0).then_some(self.grad_clip)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed by the end of the epoch.
    pub steps: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_sisnr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }

    /// Tab-separated log, one row per epoch.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\tsteps\tlr\ttrain_loss\tval_loss\tval_sisnr\tseconds\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{}\t{}\t{:e}\t{:.6}\t{:.6}\t{:.3}\t{:.1}",
                e.epoch, e.steps, e.lr, e.train_loss, e.val_loss, e.val_sisnr, e.seconds
            );
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_bad_values_do_not() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { adam_beta2: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_factor: 1.5, ..Default::default() }.validate().is_err());
        assert_eq!(TrainConfig { grad_clip: 0.0, ..Default::default() }.clip(), None);
    }

    #[test]
    fn history_tsv_has_a_row_per_epoch() {
        let h = History {
            epochs: vec![EpochRecord {
                epoch: 0,
                steps: 4,
                lr: 5e-4,
                train_loss: 1.0,
                val_loss: 0.5,
                val_sisnr: 3.0,
                seconds: 1.0,
            }],
        };
        let tsv = h.to_tsv();
        assert_eq!(tsv.lines().count(), 2);
        assert!(tsv.lines().nth(1).unwrap().starts_with("0\t4\t5e-4"));
    }
}
