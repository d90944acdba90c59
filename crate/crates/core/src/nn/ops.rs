//! Pointwise and per-channel ops with hand-written gradients.
//!
//! Every op treats its input as rows of length `C` (the last dimension). Parameter
//! gradients are column sums, computed as a ones-vector matmul.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor};
use num_traits::Float;

use crate::error::{Error, Result};

fn slice<'a, T: candle_core::WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => candle_core::bail!("expected a contiguous tensor"),
    }
}

/// Runs `f` on the storage as `f32` or `f64`.
macro_rules! dispatch1 {
    ($s:expr, $l:expr, |$x:ident| $body:expr) => {
        match $s {
            CpuStorage::F32(_) => {
                let $x = slice::<f32>($s, $l)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(_) => {
                let $x = slice::<f64>($s, $l)?;
                CpuStorage::F64($body)
            }
            other => candle_core::bail!("unsupported dtype {:?}", other.dtype()),
        }
    };
}

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$x:ident, $y:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                let $x = slice::<f32>($s1, $l1)?;
                let $y = slice::<f32>($s2, $l2)?;
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                let $x = slice::<f64>($s1, $l1)?;
                let $y = slice::<f64>($s2, $l2)?;
                CpuStorage::F64($body)
            }
            (a, b) => candle_core::bail!("unsupported dtypes {:?}, {:?}", a.dtype(), b.dtype()),
        }
    };
}

fn last_dim(l: &Layout) -> usize {
    l.dims().last().copied().unwrap_or(1).max(1)
}

/// Column sums of `t` viewed as `[rows, channels]`, returned as `[channels]`.
fn colsum(t: &Tensor, channels: usize) -> candle_core::Result<Tensor> {
    let rows = t.elem_count() / channels;
    let ones = Tensor::ones((1, rows), t.dtype(), t.device())?;
    let m = t.reshape((rows, channels))?.detach();
    super::gemm::matmul(&ones, &m)
        .map_err(|e| candle_core::Error::Msg(e.to_string()))?
        .reshape(channels)
}

fn check_channels(x: &Tensor, p: &Tensor, op: &'static str) -> Result<()> {
    let c = x.dims().last().copied().unwrap_or(0);
    if p.dims() != [c] {
        return Err(Error::shape(op, format!("[{c}]"), format!("{:?}", p.dims())));
    }
    Ok(())
}

fn sigmoid_scalar<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct Sigmoid;

impl CustomOp1 for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = dispatch1!(s, l, |x| x.iter().map(|&v| sigmoid_scalar(v)).collect());
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.mul(&res.mul(&res.affine(-1.0, 1.0)?)?)?))
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Sigmoid)?)
}

/// `x` where positive, `a_c · x` elsewhere; `a` is per channel.
struct PReluOp;

fn prelu_kernel<T: Float>(x: &[T], a: &[T], c: usize, grad_mode: bool) -> Vec<T> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| match (v > T::zero(), grad_mode) {
            (true, false) => v,
            (false, false) => a[i % c] * v,
            (true, true) => T::one(),
            (false, true) => a[i % c],
        })
        .collect()
}

struct PReluDeriv;

impl CustomOp2 for PReluDeriv {
    fn name(&self) -> &'static str {
        "prelu-deriv"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let c = last_dim(l1);
        let out = dispatch2!(s1, l1, s2, l2, |x, a| prelu_kernel(x, a, c, true));
        Ok((out, l1.shape().clone()))
    }
}

/// `min(x, 0)`.
struct NegativePart;

impl CustomOp1 for NegativePart {
    fn name(&self) -> &'static str {
        "negative-part"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = dispatch1!(s, l, |x| x.iter().map(|&v| if v < 0.0 { v } else { 0.0 }).collect());
        Ok((out, l.shape().clone()))
    }
}

impl CustomOp2 for PReluOp {
    fn name(&self) -> &'static str {
        "prelu"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let c = last_dim(l1);
        let out = dispatch2!(s1, l1, s2, l2, |x, a| prelu_kernel(x, a, c, false));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        a: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let dx = grad.mul(&x.apply_op2_no_bwd(a, &PReluDeriv)?)?;
        let da = colsum(&grad.mul(&x.apply_op1_no_bwd(&NegativePart)?)?, a.elem_count())?;
        Ok((Some(dx), Some(da)))
    }
}

pub fn prelu(x: &Tensor, slope: &Tensor) -> Result<Tensor> {
    check_channels(x, slope, "prelu")?;
    Ok(x.contiguous()?.apply_op2(&slope.contiguous()?, PReluOp)?)
}

/// Per-channel multiply.
struct ChannelScale;

impl CustomOp2 for ChannelScale {
    fn name(&self) -> &'static str {
        "channel-scale"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let c = last_dim(l1);
        let out = dispatch2!(s1, l1, s2, l2, |x, w| x.chunks(c).flat_map(|r| r.iter().zip(w).map(|(&a, &b)| a * b)).collect());
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(w, &ChannelScale)?;
        let dw = colsum(&grad.mul(x)?, w.elem_count())?;
        Ok((Some(dx), Some(dw)))
    }
}

pub fn channel_scale(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    check_channels(x, w, "channel_scale")?;
    Ok(x.contiguous()?.apply_op2(&w.contiguous()?, ChannelScale)?)
}

/// Per-channel add.
struct BiasAdd;

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "bias-add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let c = last_dim(l1);
        let out = dispatch2!(s1, l1, s2, l2, |x, b| x.chunks(c).flat_map(|r| r.iter().zip(b).map(|(&a, &b)| a + b)).collect());
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        _x: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        Ok((Some(grad.clone()), Some(colsum(grad, b.elem_count())?)))
    }
}

pub fn bias_add(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_channels(x, b, "bias_add")?;
    Ok(x.contiguous()?.apply_op2(&b.contiguous()?, BiasAdd)?)
}

/// Zero-mean, unit-variance rows: `(x − μ) / sqrt(σ² + eps)` over the last dimension.
struct Standardize {
    eps: f64,
}

fn standardize_rows<T: Float>(x: &[T], c: usize, eps: f64) -> Vec<T> {
    let n = T::from(c).expect("row length");
    let eps = T::from(eps).expect("eps");
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let inv = T::one() / (var + eps).sqrt();
        out.extend(row.iter().map(|&v| (v - mean) * inv));
    }
    out
}

/// `dx = (g − mean(g) − y·mean(g·y)) / σ`, recomputing `y` and `σ` from `x`.
fn standardize_grad<T: Float>(x: &[T], g: &[T], c: usize, eps: f64) -> Vec<T> {
    let n = T::from(c).expect("row length");
    let eps = T::from(eps).expect("eps");
    let mut out = Vec::with_capacity(x.len());
    for (row, grow) in x.chunks(c).zip(g.chunks(c)) {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let inv = T::one() / (var + eps).sqrt();
        let g_mean = grow.iter().fold(T::zero(), |a, &v| a + v) / n;
        let gy_mean = row
            .iter()
            .zip(grow)
            .fold(T::zero(), |a, (&v, &gv)| a + gv * (v - mean) * inv)
            / n;
        out.extend(
            row.iter()
                .zip(grow)
                .map(|(&v, &gv)| (gv - g_mean - (v - mean) * inv * gy_mean) * inv),
        );
    }
    out
}

struct StandardizeGrad {
    eps: f64,
}

impl CustomOp2 for StandardizeGrad {
    fn name(&self) -> &'static str {
        "standardize-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let c = last_dim(l1);
        let out = dispatch2!(s1, l1, s2, l2, |x, g| standardize_grad(x, g, c, self.eps));
        Ok((out, l1.shape().clone()))
    }
}

impl CustomOp1 for Standardize {
    fn name(&self) -> &'static str {
        "standardize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let c = last_dim(l);
        let out = dispatch1!(s, l, |x| standardize_rows(x, c, self.eps));
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = StandardizeGrad { eps: self.eps };
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &op)?))
    }
}

pub fn standardize(x: &Tensor, eps: f64) -> Result<Tensor> {
    if !matches!(x.dtype(), DType::F32 | DType::F64) {
        return Err(Error::InvalidArgument(format!("standardize: unsupported dtype {:?}", x.dtype())));
    }
    Ok(x.contiguous()?.apply_op1(Standardize { eps })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) {
        for (x, y) in flat(a).iter().zip(flat(b)) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    /// Compares forward values and gradients of `custom` and `reference` under a random
    /// linear functional.
    fn agree(
        custom: impl Fn(&Tensor, &Tensor) -> Tensor,
        reference: impl Fn(&Tensor, &Tensor) -> Tensor,
        channels: usize,
    ) {
        let x = Var::from_tensor(&rand(&[3, 4, channels], 1)).unwrap();
        let p = Var::from_tensor(&rand(&[channels], 2)).unwrap();
        let w = rand(&[3, 4, channels], 3);
        let ya = custom(x.as_tensor(), p.as_tensor());
        let yb = reference(x.as_tensor(), p.as_tensor());
        close(&ya, &yb, 1e-12);
        let ga = ya.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = yb.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        close(ga.get(x.as_tensor()).unwrap(), gb.get(x.as_tensor()).unwrap(), 1e-10);
        if let (Some(a), Some(b)) = (ga.get(p.as_tensor()), gb.get(p.as_tensor())) {
            close(a, b, 1e-10);
        }
    }

    #[test]
    fn sigmoid_matches_reference() {
        agree(
            |x, _| sigmoid(x).unwrap(),
            |x, _| (x.neg().unwrap().exp().unwrap() + 1.0).unwrap().recip().unwrap(),
            5,
        );
        let big = Tensor::new(&[-1000f32, 1000.0], &Device::Cpu).unwrap();
        assert_eq!(sigmoid(&big).unwrap().to_vec1::<f32>().unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn prelu_matches_reference() {
        agree(
            |x, a| prelu(x, a).unwrap(),
            |x, a| {
                x.relu()
                    .unwrap()
                    .sub(&x.neg().unwrap().relu().unwrap().broadcast_mul(a).unwrap())
                    .unwrap()
            },
            6,
        );
    }

    #[test]
    fn channel_ops_match_broadcasting() {
        agree(|x, w| channel_scale(x, w).unwrap(), |x, w| x.broadcast_mul(w).unwrap(), 7);
        agree(|x, b| bias_add(x, b).unwrap(), |x, b| x.broadcast_add(b).unwrap(), 7);
    }

    #[test]
    fn standardize_matches_reference() {
        agree(
            |x, _| standardize(x, 1e-5).unwrap(),
            |x, _| {
                let c = x.broadcast_sub(&x.mean_keepdim(D::Minus1).unwrap()).unwrap();
                let v = c.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
                c.broadcast_div(&(v + 1e-5).unwrap().sqrt().unwrap()).unwrap()
            },
            8,
        );
    }

    #[test]
    fn parameter_shape_is_checked() {
        let x = rand(&[2, 3], 0);
        assert!(bias_add(&x, &rand(&[2], 1)).is_err());
    }
}
