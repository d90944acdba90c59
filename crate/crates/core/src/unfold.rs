//! The unfolded forward stream.
//!
//! ```text
//! F       = encode(X)
//! Ω(0)    = initialize(F, X)
//! Ω(q)    = Ω(q-1) - η ⊙ (∇T(Ω(q-1)) + prior_q(F, Ŝ(q-1), N̂(q-1)))     q = 1..Q
//! S̃(q)    = G_s(q) ⊙ X + R_s(q),  Ñ(q) = G_n(q) ⊙ X + R_n(q)
//! Ŝ(q),N̂(q) = consistency(S̃(q), Ñ(q), X)
//! output  = fuse(X, S̃(Q), Ñ(Q))
//! ```

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::frontend::ComplexSpectrogram;
use crate::signal::{self, GainMask, GradientSet, ParameterSet, ResidualSpectrum};

pub const ETA_INIT: f64 = 0.01;

/// Step sizes for `[g_s, g_n, r_s, r_n]`, held as one length-4 tensor so they can be
/// trained like any other weight.
#[derive(Debug, Clone)]
pub struct StepSizes(Tensor);

impl StepSizes {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.dims() != [4] {
            return Err(Error::shape("StepSizes", "[4]", format!("{:?}", values.dims())));
        }
        Ok(Self(values))
    }

    pub fn constant(value: f64, dtype: DType) -> Result<Self> {
        Self::new(Tensor::full(value, 4, &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    fn get(&self, i: usize) -> Result<Tensor> {
        Ok(self.0.narrow(0, i, 1)?)
    }

    pub fn values(&self) -> Result<[f64; 4]> {
        let v: Vec<f64> = self.0.to_dtype(DType::F64)?.to_vec1()?;
        Ok([v[0], v[1], v[2], v[3]])
    }
}

/// How gains are kept inside `[0, 1]` after an update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GainClamp {
    /// Clamp the forward value, pass gradients through unchanged.
    #[default]
    StraightThrough,
    Disabled,
}

fn ensure_finite(t: &Tensor, name: &str) -> Result<()> {
    let s: f64 = t.sum_all()?.to_dtype(DType::F64)?.to_scalar()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("gradient of {name}")))
    }
}

fn clamp_gain(g: Tensor, mode: GainClamp) -> Result<Tensor> {
    match mode {
        GainClamp::Disabled => Ok(g),
        GainClamp::StraightThrough => {
            let clipped = g.clamp(0.0, 1.0)?;
            let offset = clipped.sub(&g)?.detach();
            Ok(g.add(&offset)?)
        }
    }
}

/// One explicit descent step on every parameter: `p ← p − η_p (quad_p + prior_p)`.
pub fn gdm_step(
    omega: &ParameterSet,
    prior: &GradientSet,
    quad: &GradientSet,
    eta: &StepSizes,
    clamp: GainClamp,
) -> Result<ParameterSet> {
    prior.check_against(omega)?;
    quad.check_against(omega)?;
    let update = |p: &Tensor, q: &Tensor, r: &Tensor, i: usize, name: &str| -> Result<Tensor> {
        let total = q.add(r)?;
        ensure_finite(&total, name)?;
        let step = total.broadcast_mul(&eta.get(i)?.to_dtype(p.dtype())?)?;
        Ok(p.sub(&step)?)
    };
    let g_s = update(omega.g_s.tensor(), &quad.d_g_s, &prior.d_g_s, 0, "g_s")?;
    let g_n = update(omega.g_n.tensor(), &quad.d_g_n, &prior.d_g_n, 1, "g_n")?;
    let r_s = update(omega.r_s.tensor(), &quad.d_r_s, &prior.d_r_s, 2, "r_s")?;
    let r_n = update(omega.r_n.tensor(), &quad.d_r_n, &prior.d_r_n, 3, "r_n")?;
    ParameterSet::new(
        GainMask::new(clamp_gain(g_s, clamp)?)?,
        GainMask::new(clamp_gain(g_n, clamp)?)?,
        ResidualSpectrum::new(r_s)?,
        ResidualSpectrum::new(r_n)?,
    )
}

/// Splits the mixture mismatch `x − s̃ − ñ` equally between both estimates so the
/// returned pair sums to `x`.
pub fn consistency_project(
    s_tilde: &ComplexSpectrogram,
    n_tilde: &ComplexSpectrogram,
    x: &ComplexSpectrogram,
) -> Result<(ComplexSpectrogram, ComplexSpectrogram)> {
    s_tilde.ensure_same_shape(x, "consistency_project")?;
    n_tilde.ensure_same_shape(x, "consistency_project")?;
    let half = x
        .tensor()
        .sub(s_tilde.tensor())?
        .sub(n_tilde.tensor())?
        .affine(0.5, 0.0)?;
    let s_hat = ComplexSpectrogram::new(s_tilde.tensor().add(&half)?)?;
    let n_hat = ComplexSpectrogram::new(n_tilde.tensor().add(&half)?)?;
    Ok((s_hat, n_hat))
}

/// The learned pieces the forward stream needs.
pub trait UnfoldModel {
    type Features;

    fn encode(&self, x: &ComplexSpectrogram) -> Result<Self::Features>;

    /// Produces `Ω(0)`.
    fn initialize(&self, features: &Self::Features, x: &ComplexSpectrogram) -> Result<ParameterSet>;

    /// Prior-gradient estimate for unfolding step `step` (0-based).
    fn prior_gradients(
        &self,
        step: usize,
        features: &Self::Features,
        s_hat: &ComplexSpectrogram,
        n_hat: &ComplexSpectrogram,
    ) -> Result<GradientSet>;

    fn step_sizes(&self) -> &StepSizes;

    /// Number of instantiated per-step estimators.
    fn num_steps(&self) -> usize;

    fn fuse(
        &self,
        x: &ComplexSpectrogram,
        s_tilde: &ComplexSpectrogram,
        n_tilde: &ComplexSpectrogram,
    ) -> Result<ComplexSpectrogram>;

    fn gain_clamp(&self) -> GainClamp {
        GainClamp::StraightThrough
    }
}

#[derive(Debug, Clone)]
pub struct StepTrace {
    pub omega: ParameterSet,
    pub s_tilde: ComplexSpectrogram,
    pub n_tilde: ComplexSpectrogram,
    pub s_hat: ComplexSpectrogram,
    pub n_hat: ComplexSpectrogram,
}

impl StepTrace {
    fn from_parameters(omega: ParameterSet, x: &ComplexSpectrogram) -> Result<Self> {
        let s_tilde = signal::reconstruct_source(&omega.g_s, &omega.r_s, x)?;
        let n_tilde = signal::reconstruct_source(&omega.g_n, &omega.r_n, x)?;
        let (s_hat, n_hat) = consistency_project(&s_tilde, &n_tilde, x)?;
        Ok(Self {
            omega,
            s_tilde,
            n_tilde,
            s_hat,
            n_hat,
        })
    }
}

/// Everything computed by one forward pass: `steps[q]` for `q = 0..=Q`, then the fused
/// speech estimate.
#[derive(Debug, Clone)]
pub struct UnfoldTrace {
    pub steps: Vec<StepTrace>,
    pub fused: ComplexSpectrogram,
}

impl UnfoldTrace {
    /// Number of descent steps `Q`.
    pub fn q(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    pub fn last(&self) -> &StepTrace {
        self.steps.last().expect("trace always holds the initial step")
    }
}

pub fn unfold_forward<M: UnfoldModel>(x: &ComplexSpectrogram, model: &M, q: usize) -> Result<UnfoldTrace> {
    if q > model.num_steps() {
        return Err(Error::ConfigMismatch(format!(
            "requested {q} unfolding steps but the model holds {} step estimators",
            model.num_steps()
        )));
    }
    let features = model.encode(x)?;
    let mut steps = Vec::with_capacity(q + 1);
    steps.push(StepTrace::from_parameters(model.initialize(&features, x)?, x)?);
    for step in 0..q {
        let prev = steps.last().expect("non-empty");
        let prior = model.prior_gradients(step, &features, &prev.s_hat, &prev.n_hat)?;
        let quad = signal::quadratic_gradients(&prev.omega, x)?;
        let omega = gdm_step(&prev.omega, &prior, &quad, model.step_sizes(), model.gain_clamp())?;
        steps.push(StepTrace::from_parameters(omega, x)?);
    }
    let last = steps.last().expect("non-empty");
    let fused = model.fuse(x, &last.s_tilde, &last.n_tilde)?;
    Ok(UnfoldTrace { steps, fused })
}
