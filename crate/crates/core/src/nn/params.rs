use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Const(f64),
}

/// Named trainable tensors. Creation order is deterministic, so a fixed seed always
/// produces the same initial weights.
pub struct VarStore {
    vars: Mutex<BTreeMap<String, Var>>,
    rng: Mutex<ChaCha8Rng>,
    dtype: DType,
}

impl VarStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: Mutex::new(BTreeMap::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Builder whose tensors take part in autodiff.
    pub fn root(&self) -> Builder<'_> {
        Builder {
            store: self,
            path: String::new(),
            frozen: false,
        }
    }

    /// Builder returning detached views of the same storage.
    pub fn frozen(&self) -> Builder<'_> {
        Builder {
            store: self,
            path: String::new(),
            frozen: true,
        }
    }

    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .expect("var store poisoned")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().expect("var store poisoned").get(name).cloned()
    }

    pub fn len(&self) -> usize {
        self.vars.lock().expect("var store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total scalar count of all tensors whose name starts with `prefix`.
    pub fn num_params(&self, prefix: &str) -> usize {
        self.vars
            .lock()
            .expect("var store poisoned")
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Overwrites existing variables from `values`. Every variable must be present with
    /// an identical shape.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let vars = self.vars.lock().expect("var store poisoned");
        for (name, var) in vars.iter() {
            let src = values
                .get(name)
                .ok_or_else(|| Error::ConfigMismatch(format!("missing weight {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::ConfigMismatch(format!(
                    "weight {name} has shape {:?}, model expects {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = values.keys().find(|k| !vars.contains_key(*k)) {
            return Err(Error::ConfigMismatch(format!("unexpected weight {extra}")));
        }
        Ok(())
    }

    fn create(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Const(v) => vec![v; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = self.rng.lock().expect("rng poisoned");
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.vars.lock().expect("var store poisoned").insert(name.to_string(), var);
        Ok(tensor)
    }
}

#[derive(Clone)]
pub struct Builder<'a> {
    store: &'a VarStore,
    path: String,
    frozen: bool,
}

impl<'a> Builder<'a> {
    pub fn pp(&self, segment: impl std::fmt::Display) -> Self {
        let path = if self.path.is_empty() {
            segment.to_string()
        } else {
            format!("{}.{segment}", self.path)
        };
        Self {
            store: self.store,
            path,
            frozen: self.frozen,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    /// Fetches `name` under the current path, creating it with `init` on first use.
    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.path)
        };
        let existing = self.store.get(&full);
        let t = match existing {
            Some(var) => {
                if var.dims() != shape {
                    return Err(Error::ConfigMismatch(format!(
                        "weight {full} has shape {:?}, requested {shape:?}",
                        var.dims()
                    )));
                }
                var.as_tensor().clone()
            }
            None => self.store.create(&full, shape, init)?,
        };
        Ok(if self.frozen { t.detach() } else { t })
    }
}
