//! Gain/residual source decomposition and the quadratic data term.
//!
//! Each source is modeled as `G ⊙ X + R`: a real gain on the mixture plus a complex
//! residual. With both sources in play the data term is
//!
//! ```text
//! T = || (1 - G_s - G_n) ⊙ X - R_s - R_n ||_F^2
//! ```
//!
//! and its gradients have closed forms, computed here on real/imaginary planes.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::frontend::ComplexSpectrogram;

/// Real per-bin gain, shape `[B, K, L]`.
#[derive(Debug, Clone)]
pub struct GainMask(Tensor);

impl GainMask {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::shape("GainMask", "[B, K, L]", format!("{:?}", values.dims())));
        }
        Ok(Self(values))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Complex per-bin residual, shape `[B, 2, K, L]`.
#[derive(Debug, Clone)]
pub struct ResidualSpectrum(Tensor);

impl ResidualSpectrum {
    pub fn new(planes: Tensor) -> Result<Self> {
        match planes.dims() {
            [_, 2, _, _] => Ok(Self(planes)),
            d => Err(Error::shape("ResidualSpectrum", "[B, 2, K, L]", format!("{d:?}"))),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// The four quantities refined at every unfolding step.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    pub g_s: GainMask,
    pub g_n: GainMask,
    pub r_s: ResidualSpectrum,
    pub r_n: ResidualSpectrum,
}

impl ParameterSet {
    pub fn new(g_s: GainMask, g_n: GainMask, r_s: ResidualSpectrum, r_n: ResidualSpectrum) -> Result<Self> {
        let set = Self { g_s, g_n, r_s, r_n };
        set.check_geometry()?;
        Ok(set)
    }

    /// All-zero parameters matching `x`.
    pub fn zeros_like(x: &ComplexSpectrogram) -> Result<Self> {
        let (b, _, k, l) = x.dims();
        let dev = x.tensor().device();
        let g = || Tensor::zeros((b, k, l), x.dtype(), dev);
        let r = || Tensor::zeros((b, 2, k, l), x.dtype(), dev);
        Self::new(
            GainMask::new(g()?)?,
            GainMask::new(g()?)?,
            ResidualSpectrum::new(r()?)?,
            ResidualSpectrum::new(r()?)?,
        )
    }

    fn check_geometry(&self) -> Result<()> {
        let g = self.g_s.0.dims();
        let r = self.r_s.0.dims();
        let ok = self.g_n.0.dims() == g
            && self.r_n.0.dims() == r
            && r.len() == 4
            && g == [r[0], r[2], r[3]];
        if !ok {
            return Err(Error::shape(
                "ParameterSet",
                "gains [B, K, L] and residuals [B, 2, K, L]",
                format!(
                    "g_s {:?}, g_n {:?}, r_s {:?}, r_n {:?}",
                    g,
                    self.g_n.0.dims(),
                    r,
                    self.r_n.0.dims()
                ),
            ));
        }
        Ok(())
    }

    /// `[B, 2, K, L]` geometry.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.r_s.0.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn detach(&self) -> Self {
        Self {
            g_s: GainMask(self.g_s.0.detach()),
            g_n: GainMask(self.g_n.0.detach()),
            r_s: ResidualSpectrum(self.r_s.0.detach()),
            r_n: ResidualSpectrum(self.r_n.0.detach()),
        }
    }
}

/// Gradients with respect to each member of a [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub d_g_s: Tensor,
    pub d_g_n: Tensor,
    pub d_r_s: Tensor,
    pub d_r_n: Tensor,
}

impl GradientSet {
    pub fn zeros_like(omega: &ParameterSet) -> Result<Self> {
        Ok(Self {
            d_g_s: omega.g_s.0.zeros_like()?,
            d_g_n: omega.g_n.0.zeros_like()?,
            d_r_s: omega.r_s.0.zeros_like()?,
            d_r_n: omega.r_n.0.zeros_like()?,
        })
    }

    pub fn check_against(&self, omega: &ParameterSet) -> Result<()> {
        let pairs = [
            ("d_g_s", &self.d_g_s, &omega.g_s.0),
            ("d_g_n", &self.d_g_n, &omega.g_n.0),
            ("d_r_s", &self.d_r_s, &omega.r_s.0),
            ("d_r_n", &self.d_r_n, &omega.r_n.0),
        ];
        for (name, g, p) in pairs {
            if g.dims() != p.dims() {
                return Err(Error::shape(
                    "GradientSet",
                    format!("{name} {:?}", p.dims()),
                    format!("{:?}", g.dims()),
                ));
            }
        }
        Ok(())
    }
}

fn check_gain(g: &GainMask, x: &ComplexSpectrogram, op: &'static str) -> Result<()> {
    let (b, _, k, l) = x.dims();
    if g.0.dims() != [b, k, l] {
        return Err(Error::shape(op, format!("gain [{b}, {k}, {l}]"), format!("{:?}", g.0.dims())));
    }
    Ok(())
}

fn check_residual(r: &ResidualSpectrum, x: &ComplexSpectrogram, op: &'static str) -> Result<()> {
    if r.0.dims() != x.tensor().dims() {
        return Err(Error::shape(
            op,
            format!("residual {:?}", x.tensor().dims()),
            format!("{:?}", r.0.dims()),
        ));
    }
    Ok(())
}

/// `g ⊙ x + r`, the gain applied to both planes.
pub fn reconstruct_source(g: &GainMask, r: &ResidualSpectrum, x: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
    check_gain(g, x, "reconstruct_source")?;
    check_residual(r, x, "reconstruct_source")?;
    let out = x.tensor().broadcast_mul(&g.0.unsqueeze(1)?)?.add(&r.0)?;
    ComplexSpectrogram::new(out)
}

/// `E = (1 - g_s - g_n) ⊙ x - r_s - r_n`.
pub fn quadratic_residual(omega: &ParameterSet, x: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
    omega.check_geometry()?;
    check_gain(&omega.g_s, x, "quadratic_residual")?;
    check_residual(&omega.r_s, x, "quadratic_residual")?;
    let keep = (omega.g_s.0.add(&omega.g_n.0)?.affine(-1.0, 1.0))?.unsqueeze(1)?;
    let e = x
        .tensor()
        .broadcast_mul(&keep)?
        .sub(&omega.r_s.0)?
        .sub(&omega.r_n.0)?;
    ComplexSpectrogram::new(e)
}

/// The data term `T = Σ |E|²` over the whole batch, as a differentiable scalar tensor.
pub fn quadratic_term_tensor(omega: &ParameterSet, x: &ComplexSpectrogram) -> Result<Tensor> {
    Ok(quadratic_residual(omega, x)?.tensor().sqr()?.sum_all()?)
}

pub fn quadratic_term(omega: &ParameterSet, x: &ComplexSpectrogram) -> Result<f64> {
    Ok(quadratic_term_tensor(omega, x)?.to_dtype(DType::F64)?.to_scalar()?)
}

/// Analytic gradients of `T`:
/// `∂T/∂g_s = ∂T/∂g_n = -2 Re(conj(X) E)` and `∂T/∂r_s = ∂T/∂r_n = -2 E` (per plane).
pub fn quadratic_gradients(omega: &ParameterSet, x: &ComplexSpectrogram) -> Result<GradientSet> {
    let e = quadratic_residual(omega, x)?;
    let d_g = x.tensor().mul(e.tensor())?.sum(1)?.affine(-2.0, 0.0)?;
    let d_r = e.tensor().affine(-2.0, 0.0)?;
    Ok(GradientSet {
        d_g_s: d_g.clone(),
        d_g_n: d_g,
        d_r_s: d_r.clone(),
        d_r_n: d_r,
    })
}
