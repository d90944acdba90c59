//! Adam with global-norm gradient clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

pub struct Adam {
    cfg: AdamConfig,
    vars: Vec<(String, Var)>,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, cfg: AdamConfig) -> Result<Self> {
        if !(cfg.lr > 0.0 && (0.0..1.0).contains(&cfg.beta1) && (0.0..1.0).contains(&cfg.beta2) && cfg.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {cfg:?}")));
        }
        Ok(Self {
            cfg,
            vars,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Sum of squared gradients over all tracked variables.
    pub fn grad_sq_norms(&self, grads: &GradStore) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                let s: f64 = g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar()?;
                out.insert(name.clone(), s);
            }
        }
        Ok(out)
    }

    /// Applies one update. Gradients are rescaled to global norm `clip` when it is
    /// exceeded; a non-finite norm aborts without touching any weight.
    pub fn step(&mut self, grads: &GradStore, clip: Option<f64>) -> Result<StepStats> {
        let sq = self.grad_sq_norms(grads)?;
        self.step_with_norms(grads, &sq, clip)
    }

    pub fn step_with_norms(
        &mut self,
        grads: &GradStore,
        squared: &BTreeMap<String, f64>,
        clip: Option<f64>,
    ) -> Result<StepStats> {
        let norm = squared.values().sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let scale = match clip {
            Some(c) if c > 0.0 && norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bias1 = 1.0 - beta1.powi(self.t as i32);
        let bias2 = 1.0 - beta2.powi(self.t as i32);
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = if scale != 1.0 { (g * scale)? } else { g.clone() };
            let m = match self.m.get(name) {
                Some(m) => ((m * beta1)? + (&g * (1.0 - beta1))?)?,
                None => (&g * (1.0 - beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                None => (g.sqr()? * (1.0 - beta2))?,
            };
            let denom = ((&v / bias2)?.sqrt()? + eps)?;
            let update = ((&m / bias1)?.div(&denom)? * lr)?;
            var.set(&var.as_tensor().sub(&update)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(StepStats {
            grad_norm: norm,
            clipped: scale != 1.0,
        })
    }

    /// Moment tensors keyed `m.<name>` / `v.<name>`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v.{k}"), t.clone());
        }
        out
    }

    pub fn load_state(&mut self, steps: u64, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let shapes: BTreeMap<&str, &[usize]> = self.vars.iter().map(|(n, var)| (n.as_str(), var.dims())).collect();
        for (key, t) in state {
            let (slot, name) = match key.split_once('.') {
                Some(("m", n)) => (&mut m, n),
                Some(("v", n)) => (&mut v, n),
                _ => return Err(Error::ConfigMismatch(format!("unknown optimizer entry {key}"))),
            };
            match shapes.get(name) {
                Some(&s) if s == t.dims() => {
                    slot.insert(name.to_string(), t.clone());
                }
                Some(&s) => {
                    return Err(Error::ConfigMismatch(format!(
                        "optimizer state {key} has shape {:?}, weight has {s:?}",
                        t.dims()
                    )))
                }
                None => return Err(Error::ConfigMismatch(format!("optimizer state for unknown weight {name}"))),
            }
        }
        self.t = steps;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
