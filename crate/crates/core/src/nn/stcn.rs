use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{CumulativeNorm, DilatedDepthwise, Glu1d, Linear, PRelu};
use super::params::Builder;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StcnConfig {
    pub groups: usize,
    pub tcm_per_group: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub causal: bool,
    /// Channel width of the dilated convolution inside each module.
    pub bottleneck: usize,
}

impl Default for StcnConfig {
    fn default() -> Self {
        Self {
            groups: 2,
            tcm_per_group: 4,
            kernel: 3,
            dilations: vec![1, 2, 5, 9],
            causal: true,
            bottleneck: 64,
        }
    }
}

impl StcnConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.causal {
            return Err(Error::Config("only causal S-TCNs are supported".into()));
        }
        if self.tcm_per_group != self.dilations.len() {
            return Err(Error::Config(format!(
                "tcm_per_group = {} but {} dilations given",
                self.tcm_per_group,
                self.dilations.len()
            )));
        }
        if self.groups == 0 || self.kernel == 0 || self.bottleneck == 0 || self.dilations.contains(&0) {
            return Err(Error::Config("S-TCN sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Squeezed temporal convolution module with a residual connection:
/// `x + out(norm(prelu(dwconv(norm(prelu(in(x)))))))`.
#[derive(Debug, Clone)]
struct Tcm {
    squeeze: Linear,
    act1: PRelu,
    norm1: CumulativeNorm,
    dconv: DilatedDepthwise,
    act2: PRelu,
    norm2: CumulativeNorm,
    expand: Linear,
}

impl Tcm {
    fn new(vb: &Builder, width: usize, cfg: &StcnConfig, dilation: usize) -> Result<Self> {
        let b = cfg.bottleneck;
        Ok(Self {
            squeeze: Linear::new(&vb.pp("squeeze"), width, b, true)?,
            act1: PRelu::new(&vb.pp("act1"), b)?,
            norm1: CumulativeNorm::new(&vb.pp("norm1"), b)?,
            dconv: DilatedDepthwise::new(&vb.pp("dconv"), b, cfg.kernel, dilation)?,
            act2: PRelu::new(&vb.pp("act2"), b)?,
            norm2: CumulativeNorm::new(&vb.pp("norm2"), b)?,
            expand: Linear::new(&vb.pp("expand"), b, width, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&self.act1.forward(&self.squeeze.forward(x)?)?)?;
        let h = self.norm2.forward(&self.act2.forward(&self.dconv.forward(&h)?)?)?;
        Ok(x.add(&self.expand.forward(&h)?)?)
    }
}

/// Stacked groups of dilated modules over `[B, T, width]`.
#[derive(Debug, Clone)]
pub struct Stcn {
    modules: Vec<Tcm>,
}

impl Stcn {
    pub fn new(vb: &Builder, width: usize, cfg: &StcnConfig) -> Result<Self> {
        cfg.validate()?;
        let mut modules = Vec::with_capacity(cfg.groups * cfg.dilations.len());
        for g in 0..cfg.groups {
            for (i, &d) in cfg.dilations.iter().enumerate() {
                modules.push(Tcm::new(&vb.pp(format!("g{g}")).pp(i), width, cfg, d)?);
            }
        }
        Ok(Self { modules })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for m in &self.modules {
            h = m.forward(&h)?;
        }
        Ok(h)
    }
}

/// Per-frame calculator: gated compression, S-TCN trunk, two linear heads.
#[derive(Debug, Clone)]
pub struct Calculator {
    compress: Glu1d,
    trunk: Stcn,
    head_a: Linear,
    head_b: Linear,
}

impl Calculator {
    pub fn new(vb: &Builder, input: usize, width: usize, bins: usize, cfg: &StcnConfig) -> Result<Self> {
        Ok(Self {
            compress: Glu1d::new(&vb.pp("compress"), input, width)?,
            trunk: Stcn::new(&vb.pp("trunk"), width, cfg)?,
            head_a: Linear::new(&vb.pp("head_a"), width, bins, true)?,
            head_b: Linear::new(&vb.pp("head_b"), width, bins, true)?,
        })
    }

    /// `[B, T, input]` to two `[B, T, bins]` outputs.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.trunk.forward(&self.compress.forward(x)?)?;
        Ok((self.head_a.forward(&h)?, self.head_b.forward(&h)?))
    }
}
