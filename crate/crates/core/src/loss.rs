//! Training objective on power-compressed spectra.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{compress_planes, ComplexSpectrogram};
use crate::unfold::UnfoldTrace;

/// Regularizer inside the compression and magnitude roots, so gradients stay finite
/// at zero bins.
pub const LOSS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of every intermediate step.
    pub gamma: f64,
    /// Weight of the fused output.
    pub zeta: f64,
    /// Compression exponent.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            zeta: 1.0,
            beta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.zeta > 0.0 && self.zeta.is_finite()) {
            return Err(Error::Config(format!("zeta must be positive, got {}", self.zeta)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        Ok(())
    }
}

/// Marks the valid frames of each batch item; padded frames contribute nothing.
#[derive(Debug, Clone)]
pub struct FrameMask {
    lengths: Vec<usize>,
    frames: usize,
}

impl FrameMask {
    pub fn new(lengths: Vec<usize>, frames: usize) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::InvalidArgument("frame mask needs at least one item".into()));
        }
        if let Some(&l) = lengths.iter().find(|&&l| l == 0 || l > frames) {
            return Err(Error::InvalidArgument(format!("valid length {l} outside 1..={frames}")));
        }
        Ok(Self { lengths, frames })
    }

    pub fn full(batch: usize, frames: usize) -> Result<Self> {
        Self::new(vec![frames; batch], frames)
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn is_full(&self) -> bool {
        self.lengths.iter().all(|&l| l == self.frames)
    }

    pub fn valid_frames(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// `[B, planes, K, L]` weights: one on valid frames, zero on padding.
    fn weights(&self, planes: usize, bins: usize, dtype: DType) -> Result<Tensor> {
        let rows: Vec<f32> = self
            .lengths
            .iter()
            .flat_map(|&len| (0..self.frames).map(move |l| if l < len { 1.0 } else { 0.0 }))
            .collect();
        let rows = Tensor::from_vec(rows, (self.lengths.len(), 1, 1, self.frames), &Device::Cpu)?;
        Ok(rows
            .broadcast_as((self.lengths.len(), planes, bins, self.frames))?
            .contiguous()?
            .to_dtype(dtype)?)
    }
}

/// Compressed planes and magnitudes of one spectrum.
struct Compressed {
    planes: Tensor,
    mag: Tensor,
}

impl Compressed {
    fn new(spec: &ComplexSpectrogram, beta: f64, dtype: DType) -> Result<Self> {
        let planes = compress_planes(&spec.tensor().to_dtype(dtype)?, beta, LOSS_EPS)?;
        // |c|² / sqrt(|c|² + eps): exact zero at the origin with a bounded slope.
        let m2 = planes.sqr()?.sum_keepdim(1)?;
        let mag = m2.div(&(&m2 + LOSS_EPS)?.sqrt()?)?;
        Ok(Self { planes, mag })
    }
}

struct Masks {
    ri: Option<Tensor>,
    mag: Option<Tensor>,
    count: f64,
}

impl Masks {
    fn new(reference: &ComplexSpectrogram, mask: Option<&FrameMask>, dtype: DType) -> Result<Self> {
        let (b, _, k, l) = reference.dims();
        match mask {
            None => Ok(Self {
                ri: None,
                mag: None,
                count: (b * k * l) as f64,
            }),
            Some(m) => {
                if m.lengths.len() != b || m.frames != l {
                    return Err(Error::shape(
                        "spectral_loss",
                        format!("mask for {b} items of {l} frames"),
                        format!("{} items of {} frames", m.lengths.len(), m.frames),
                    ));
                }
                if m.is_full() {
                    return Self::new(reference, None, dtype);
                }
                Ok(Self {
                    ri: Some(m.weights(2, k, dtype)?),
                    mag: Some(m.weights(1, k, dtype)?),
                    count: (m.valid_frames() * k) as f64,
                })
            }
        }
    }
}

fn masked_sum(t: Tensor, mask: &Option<Tensor>) -> Result<Tensor> {
    Ok(match mask {
        Some(m) => t.mul(m)?.sum_all()?,
        None => t.sum_all()?,
    })
}

fn pair_loss(est: &ComplexSpectrogram, reference: &Compressed, beta: f64, masks: &Masks) -> Result<Tensor> {
    let e = Compressed::new(est, beta, est.dtype())?;
    if e.planes.dims() != reference.planes.dims() {
        return Err(Error::shape(
            "spectral_loss",
            format!("{:?}", reference.planes.dims()),
            format!("{:?}", e.planes.dims()),
        ));
    }
    let ri = masked_sum(e.planes.sub(&reference.planes)?.sqr()?, &masks.ri)?;
    let mag = masked_sum(e.mag.sub(&reference.mag)?.sqr()?, &masks.mag)?;
    Ok(((ri + mag)? * (0.5 / masks.count))?)
}

/// Differentiable `0.5 · MSE(RI) + 0.5 · MSE(|·|)` on compressed spectra. The RI error
/// per bin is the squared complex distance; both means run over bins and valid frames.
pub fn spectral_loss(
    est: &ComplexSpectrogram,
    reference: &ComplexSpectrogram,
    beta: f64,
    mask: Option<&FrameMask>,
) -> Result<Tensor> {
    est.ensure_same_shape(reference, "spectral_loss")?;
    let masks = Masks::new(reference, mask, est.dtype())?;
    let r = Compressed::new(&reference.detach(), beta, est.dtype())?;
    pair_loss(est, &r, beta, &masks)
}

pub fn compressed_spectral_loss(est: &ComplexSpectrogram, reference: &ComplexSpectrogram, beta: f64) -> Result<f64> {
    scalar(&spectral_loss(
        &est.to_dtype(DType::F64)?,
        &reference.to_dtype(DType::F64)?,
        beta,
        None,
    )?)
}

/// Differentiable weighted objective over a full trace:
/// `Σ_q γ/2 · (ℓ(s̃_q, s) + ℓ(ñ_q, n)) + ζ · ℓ(fused, s)`.
pub fn unfolded_loss(
    trace: &UnfoldTrace,
    s_ref: &ComplexSpectrogram,
    n_ref: &ComplexSpectrogram,
    weights: &LossWeights,
    mask: Option<&FrameMask>,
) -> Result<Tensor> {
    weights.validate()?;
    if trace.steps.is_empty() {
        return Err(Error::InvalidArgument("trace holds no steps".into()));
    }
    let dtype = trace.fused.dtype();
    s_ref.ensure_same_shape(&trace.fused, "unfolded_loss")?;
    n_ref.ensure_same_shape(&trace.fused, "unfolded_loss")?;
    let masks = Masks::new(s_ref, mask, dtype)?;
    let s = Compressed::new(&s_ref.detach(), weights.beta, dtype)?;
    let n = Compressed::new(&n_ref.detach(), weights.beta, dtype)?;
    let mut total = (pair_loss(&trace.fused, &s, weights.beta, &masks)? * weights.zeta)?;
    for step in &trace.steps {
        let pair = (pair_loss(&step.s_tilde, &s, weights.beta, &masks)?
            + pair_loss(&step.n_tilde, &n, weights.beta, &masks)?)?;
        total = (total + (pair * (0.5 * weights.gamma))?)?;
    }
    Ok(total)
}

pub fn unfolded_training_loss(
    trace: &UnfoldTrace,
    s_ref: &ComplexSpectrogram,
    n_ref: &ComplexSpectrogram,
    weights: &LossWeights,
) -> Result<f64> {
    scalar(&unfolded_loss(trace, s_ref, n_ref, weights, None)?)
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar()?)
}
