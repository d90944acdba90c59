//! The optimization loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use super::checkpoint::{Checkpoint, Progress};
use super::evaluate::{validate, Validation};
use super::optim::Adam;
use super::schedule::Plateau;
use super::{EpochRecord, History, TrainConfig};
use crate::data::{Batch, Batches, Dataset};
use crate::error::{Error, Result};
use crate::frontend::AnalysisConfig;
use crate::loss::{scalar, unfolded_loss, LossWeights};
use crate::nn::Network;

pub const BEST_NAME: &str = "best.safetensors";
pub const LAST_NAME: &str = "last.safetensors";
pub const HISTORY_NAME: &str = "history.tsv";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: PathBuf,
    pub last: PathBuf,
    pub history: History,
}

/// Component a weight belongs to: `encoder`, `initializer`, `steps.<i>`, `fusion` or `eta`.
pub fn param_group(name: &str) -> &str {
    let mut it = name.match_indices('.');
    match it.next() {
        Some((i, _)) if &name[..i] == "steps" => match it.next() {
            Some((j, _)) => &name[..j],
            None => name,
        },
        Some((i, _)) => &name[..i],
        None => name,
    }
}

pub struct Trainer {
    network: Network,
    cfg: TrainConfig,
    loss: LossWeights,
    analysis: AnalysisConfig,
    optim: Adam,
    schedule: Plateau,
    epoch: usize,
    best: Option<f64>,
    val_losses: Vec<f64>,
    history: History,
    grad_totals: BTreeMap<String, f64>,
}

impl Trainer {
    pub fn new(network: Network, cfg: TrainConfig, loss: LossWeights, analysis: AnalysisConfig) -> Result<Self> {
        cfg.validate()?;
        loss.validate()?;
        analysis.validate()?;
        let model = network.config();
        if model.q != cfg.q || model.fusion != cfg.fusion {
            return Err(Error::ConfigMismatch(format!(
                "training for q = {}, fusion {} but the model has q = {}, fusion {}",
                cfg.q, cfg.fusion, model.q, model.fusion
            )));
        }
        let optim = Adam::new(network.store().vars(), cfg.adam())?;
        let schedule = Plateau::new(cfg.lr, cfg.plateau_patience, cfg.lr_factor);
        Ok(Self {
            network,
            cfg,
            loss,
            analysis,
            optim,
            schedule,
            epoch: 0,
            best: None,
            val_losses: Vec::new(),
            history: History::default(),
            grad_totals: BTreeMap::new(),
        })
    }

    /// Continues from a checkpoint: weights, optimizer moments and the schedule
    /// position are restored.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(ckpt.network()?, ckpt.train.clone(), ckpt.loss, ckpt.analysis)?;
        t.optim.load_state(ckpt.optimizer_steps, &ckpt.optimizer)?;
        t.epoch = ckpt.progress.epoch;
        t.best = ckpt.progress.best_val_loss;
        for &v in &ckpt.progress.val_losses {
            t.schedule.observe(v);
        }
        t.val_losses = ckpt.progress.val_losses.clone();
        Ok(t)
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn into_network(self) -> Network {
        self.network
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.optim.steps()
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.optim.set_lr(lr);
    }

    /// Sum over all steps so far of each component's gradient L2 norm.
    pub fn accumulated_grad_norms(&self) -> &BTreeMap<String, f64> {
        &self.grad_totals
    }

    /// One forward/backward pass and optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let trace = self.network.model().forward(&batch.mixture)?;
        let loss = unfolded_loss(&trace, &batch.clean, &batch.noise, &self.loss, Some(&batch.mask))?;
        let value = scalar(&loss)?;
        let step = self.optim.steps() as usize + 1;
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        let grads = loss.backward()?;
        let squared = self.optim.grad_sq_norms(&grads)?;
        let stats = match self.optim.step_with_norms(&grads, &squared, self.cfg.clip()) {
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { step, loss: value }),
            other => other?,
        };
        let mut groups: BTreeMap<&str, f64> = BTreeMap::new();
        for (name, s) in &squared {
            *groups.entry(param_group(name)).or_default() += s;
        }
        for (g, s) in groups {
            *self.grad_totals.entry(g.to_string()).or_default() += s.sqrt();
        }
        Ok(StepReport {
            step: self.optim.steps(),
            loss: value,
            grad_norm: stats.grad_norm,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.network,
            &self.cfg,
            &self.loss,
            &self.analysis,
            Some(&self.optim),
            Progress {
                epoch: self.epoch,
                step: self.optim.steps(),
                lr: self.schedule.lr(),
                best_val_loss: self.best,
                val_losses: self.val_losses.clone(),
            },
        )
    }

    pub fn validate(&self, set: &Dataset) -> Result<Validation> {
        validate(&self.network, set, &self.loss, &self.analysis)
    }

    fn limit_reached(&self) -> bool {
        self.cfg.max_steps > 0 && self.optim.steps() as usize >= self.cfg.max_steps
    }

    /// Runs the remaining epochs, validating after each, and keeps `best` and `last`
    /// checkpoints plus a history log in `out_dir`.
    pub fn fit(&mut self, train: Arc<Dataset>, val: &Dataset, out_dir: impl AsRef<Path>) -> Result<FitOutcome> {
        let out_dir = out_dir.as_ref();
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let best_path = out_dir.join(BEST_NAME);
        let last_path = out_dir.join(LAST_NAME);
        while self.epoch < self.cfg.epochs && !self.limit_reached() {
            let started = Instant::now();
            let lr = self.schedule.lr();
            self.optim.set_lr(lr);
            let order = train.epoch_order(self.cfg.seed, self.epoch);
            let batches = Batches::new(train.clone(), &order, self.cfg.batch_size, self.analysis, self.cfg.prefetch);
            let (mut sum, mut count) = (0.0, 0usize);
            for batch in batches {
                let report = match self.train_step(&batch?) {
                    Ok(r) => r,
                    Err(e @ Error::Diverged { .. }) => {
                        self.checkpoint().save(&last_path)?;
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                };
                sum += report.loss;
                count += 1;
                if self.cfg.log_every > 0 && report.step % self.cfg.log_every as u64 == 0 {
                    log::info!(
                        "epoch {} step {} loss {:.5} grad-norm {:.3}",
                        self.epoch,
                        report.step,
                        report.loss,
                        report.grad_norm
                    );
                }
                if self.limit_reached() {
                    break;
                }
            }
            let v = self.validate(val)?;
            let train_loss = if count > 0 { sum / count as f64 } else { f64::NAN };
            self.history.epochs.push(EpochRecord {
                epoch: self.epoch,
                steps: self.optim.steps(),
                lr,
                train_loss,
                val_loss: v.loss,
                val_sisnr: v.report.mean_enhanced(),
                seconds: started.elapsed().as_secs_f64(),
            });
            log::info!(
                "epoch {} done: train {:.5} val {:.5} val SI-SNR {:.2} dB lr {:e}",
                self.epoch,
                train_loss,
                v.loss,
                v.report.mean_enhanced(),
                lr
            );
            self.schedule.observe(v.loss);
            self.val_losses.push(v.loss);
            self.epoch += 1;
            let improved = self.best.is_none_or(|b| v.loss < b);
            if improved {
                self.best = Some(v.loss);
            }
            let ckpt = self.checkpoint();
            ckpt.save(&last_path)?;
            if improved {
                ckpt.save(&best_path)?;
            }
            self.history.write(out_dir.join(HISTORY_NAME))?;
        }
        if !best_path.exists() {
            self.checkpoint().save(&best_path)?;
        }
        if !last_path.exists() {
            self.checkpoint().save(&last_path)?;
        }
        Ok(FitOutcome {
            best: best_path,
            last: last_path,
            history: self.history.clone(),
        })
    }
}
