//! Channels-last building blocks. 2D feature maps are `[B, T, F, C]`, sequences are
//! `[B, T, C]`. Every time-axis operation only looks at the current and past frames.

use candle_core::Tensor;

use super::gather::Taps;
use super::gemm::matmul;
use super::ops::{bias_add, channel_scale, prelu, standardize};
use super::params::{Builder, Init};
use crate::error::{Error, Result};

pub use super::ops::sigmoid;

const NORM_EPS: f64 = 1e-5;

/// Applies `f` to the last dimension flattened as a matrix.
fn over_last_dim(x: &Tensor, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let last = *dims.last().ok_or_else(|| Error::InvalidArgument("scalar input".into()))?;
    let rows = x.elem_count() / last.max(1);
    let y = f(&x.reshape((rows, last))?)?;
    let mut out = dims;
    *out.last_mut().expect("non-empty") = y.dim(1)?;
    Ok(y.reshape(out)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(vb: &Builder, input: usize, output: usize, bias: bool) -> Result<Self> {
        let weight = vb.get("weight", &[input, output], Init::FanIn(input))?;
        let bias = if bias {
            Some(vb.get("bias", &[output], Init::FanIn(input))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        over_last_dim(x, |m| {
            let y = matmul(m, &self.weight)?;
            match &self.bias {
                Some(b) => bias_add(&y, b),
                None => Ok(y),
            }
        })
    }
}

/// Per-channel parametric ReLU on the last dimension.
#[derive(Debug, Clone)]
pub struct PRelu {
    slope: Tensor,
}

impl PRelu {
    pub fn new(vb: &Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            slope: vb.get("slope", &[channels], Init::Const(0.25))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        prelu(x, &self.slope)
    }
}

/// Layer normalization over the channel (last) dimension at every position.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    gain: Tensor,
    shift: Tensor,
}

impl ChannelNorm {
    pub fn new(vb: &Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            gain: vb.get("gain", &[channels], Init::Const(1.0))?,
            shift: vb.get("shift", &[channels], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        bias_add(&channel_scale(&standardize(x, NORM_EPS)?, &self.gain)?, &self.shift)
    }
}

/// Cumulative layer normalization for `[B, T, C]`: statistics at frame `t` pool every
/// channel of frames `0..=t`.
#[derive(Debug, Clone)]
pub struct CumulativeNorm {
    gain: Tensor,
    shift: Tensor,
}

impl CumulativeNorm {
    pub fn new(vb: &Builder, channels: usize) -> Result<Self> {
        Ok(Self {
            gain: vb.get("gain", &[channels], Init::Const(1.0))?,
            shift: vb.get("shift", &[channels], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, frames, channels) = x.dims3()?;
        let s1 = x.sum_keepdim(2)?;
        let s2 = x.sqr()?.sum_keepdim(2)?;
        let cum = Tensor::cat(&[s1, s2], 2)?.cumsum(1)?;
        let counts: Vec<f64> = (1..=frames).map(|t| 1.0 / (t * channels) as f64).collect();
        let counts = Tensor::from_vec(counts, (1, frames, 1), x.device())?.to_dtype(x.dtype())?;
        let moments = cum.broadcast_mul(&counts)?;
        let mean = moments.narrow(2, 0, 1)?;
        // abs() absorbs tiny negative values left by rounding in E[x²] − E[x]².
        let var = (moments.narrow(2, 1, 1)?.sub(&mean.sqr()?)?.abs()? + NORM_EPS)?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&var.sqrt()?.recip()?)?;
        bias_add(&channel_scale(&y, &self.gain)?, &self.shift)
    }
}

fn conv_taps(x: &Tensor, time: usize, stride: usize, offsets: Vec<isize>, out_bins: usize) -> Result<Tensor> {
    Taps {
        time,
        stride,
        offsets,
        out_bins,
    }
    .apply(x)
}

/// Kernel-3 frequency neighbourhoods (one bin of zero padding on each side) of every
/// causal time window. Stride 2 yields `ceil(F / 2)` output bins.
fn down_taps(x: &Tensor, time: usize, stride: usize) -> Result<Tensor> {
    let bins = x.dim(2)?;
    conv_taps(x, time, stride, vec![-1, 0, 1], bins.div_ceil(stride))
}

fn check_conv(time_kernel: usize, stride: usize) -> Result<()> {
    if time_kernel == 0 || !(1..=2).contains(&stride) {
        return Err(Error::InvalidArgument(format!(
            "unsupported conv geometry: time kernel {time_kernel}, stride {stride}"
        )));
    }
    Ok(())
}

/// 2D convolution with kernel `(time_kernel, 3)`, causal in time and stride 1 or 2
/// along frequency.
#[derive(Debug, Clone)]
pub struct CausalConv2d {
    time_kernel: usize,
    stride: usize,
    proj: Linear,
}

impl CausalConv2d {
    pub fn new(vb: &Builder, input: usize, output: usize, time_kernel: usize, stride: usize) -> Result<Self> {
        check_conv(time_kernel, stride)?;
        Ok(Self {
            time_kernel,
            stride,
            proj: Linear::new(vb, 3 * time_kernel * input, output, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.proj.forward(&down_taps(x, self.time_kernel, self.stride)?)
    }
}

/// Patches for a transposed stride-2 convolution: output bin `2f` sees input `f`
/// through the centre tap, bin `2f + 1` sees inputs `f` and `f + 1`.
struct UpTaps {
    even: Tensor,
    odd: Tensor,
}

impl UpTaps {
    fn new(x: &Tensor, time: usize) -> Result<Self> {
        let bins = x.dim(2)?;
        Ok(Self {
            even: conv_taps(x, time, 1, vec![0], bins)?,
            odd: conv_taps(x, time, 1, vec![0, 1], bins)?,
        })
    }
}

/// Transposed counterpart of a stride-2 [`CausalConv2d`]: doubles the frequency axis
/// (then trims to `out_bins`), causal in time.
#[derive(Debug, Clone)]
pub struct CausalUpConv2d {
    time_kernel: usize,
    center: Linear,
    sides: Linear,
    bias: Tensor,
}

impl CausalUpConv2d {
    pub fn new(vb: &Builder, input: usize, output: usize, time_kernel: usize) -> Result<Self> {
        check_conv(time_kernel, 1)?;
        let fan_in = 3 * time_kernel * input;
        Ok(Self {
            time_kernel,
            center: Linear::new(&vb.pp("center"), time_kernel * input, output, false)?,
            sides: Linear::new(&vb.pp("sides"), 2 * time_kernel * input, output, false)?,
            bias: vb.get("bias", &[output], Init::FanIn(fan_in))?,
        })
    }

    fn check_bins(bins: usize, out_bins: usize) -> Result<()> {
        if out_bins + 1 != 2 * bins && out_bins != 2 * bins {
            return Err(Error::shape(
                "CausalUpConv2d",
                format!("{} or {} output bins", 2 * bins - 1, 2 * bins),
                out_bins.to_string(),
            ));
        }
        Ok(())
    }

    fn project(&self, taps: &UpTaps, out_bins: usize) -> Result<Tensor> {
        let even = self.center.forward(&taps.even)?;
        let odd = self.sides.forward(&taps.odd)?;
        let (b, t, f, c) = even.dims4()?;
        let y = Tensor::stack(&[even, odd], 3)?.reshape((b, t, 2 * f, c))?;
        bias_add(&y.narrow(2, 0, out_bins)?, &self.bias)
    }

    pub fn forward(&self, x: &Tensor, out_bins: usize) -> Result<Tensor> {
        Self::check_bins(x.dim(2)?, out_bins)?;
        self.project(&UpTaps::new(x, self.time_kernel)?, out_bins)
    }
}

/// Gated convolution: `value ⊙ σ(gate)` where both branches see the same patches.
#[derive(Debug, Clone)]
pub struct GatedConv2d {
    time_kernel: usize,
    stride: usize,
    value: Linear,
    gate: Linear,
}

impl GatedConv2d {
    pub fn new(vb: &Builder, input: usize, output: usize, time_kernel: usize, stride: usize) -> Result<Self> {
        check_conv(time_kernel, stride)?;
        let width = 3 * time_kernel * input;
        Ok(Self {
            time_kernel,
            stride,
            value: Linear::new(&vb.pp("value"), width, output, true)?,
            gate: Linear::new(&vb.pp("gate"), width, output, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let z = down_taps(x, self.time_kernel, self.stride)?;
        Ok(self.value.forward(&z)?.mul(&sigmoid(&self.gate.forward(&z)?)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct GatedUpConv2d {
    value: CausalUpConv2d,
    gate: CausalUpConv2d,
}

impl GatedUpConv2d {
    pub fn new(vb: &Builder, input: usize, output: usize, time_kernel: usize) -> Result<Self> {
        Ok(Self {
            value: CausalUpConv2d::new(&vb.pp("value"), input, output, time_kernel)?,
            gate: CausalUpConv2d::new(&vb.pp("gate"), input, output, time_kernel)?,
        })
    }

    pub fn forward(&self, x: &Tensor, out_bins: usize) -> Result<Tensor> {
        CausalUpConv2d::check_bins(x.dim(2)?, out_bins)?;
        let taps = UpTaps::new(x, self.value.time_kernel)?;
        let value = self.value.project(&taps, out_bins)?;
        Ok(value.mul(&sigmoid(&self.gate.project(&taps, out_bins)?)?)?)
    }
}

/// Pointwise gated compression of `[B, T, C_in]` to `[B, T, C_out]`.
#[derive(Debug, Clone)]
pub struct Glu1d {
    value: Linear,
    gate: Linear,
}

impl Glu1d {
    pub fn new(vb: &Builder, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            value: Linear::new(&vb.pp("value"), input, output, true)?,
            gate: Linear::new(&vb.pp("gate"), input, output, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.value.forward(x)?.mul(&sigmoid(&self.gate.forward(x)?)?)?)
    }
}

/// Depthwise dilated causal convolution on `[B, T, C]`:
/// `y[t] = b + Σ_j w_j ⊙ x[t - j·dilation]`.
#[derive(Debug, Clone)]
pub struct DilatedDepthwise {
    taps: Vec<Tensor>,
    bias: Tensor,
    dilation: usize,
}

impl DilatedDepthwise {
    pub fn new(vb: &Builder, channels: usize, kernel: usize, dilation: usize) -> Result<Self> {
        let weight = vb.get("weight", &[kernel, channels], Init::FanIn(kernel))?;
        let taps = (0..kernel)
            .map(|j| weight.get(j))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            taps,
            bias: vb.get("bias", &[channels], Init::FanIn(kernel))?,
            dilation,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let frames = x.dim(1)?;
        let mut acc = channel_scale(x, &self.taps[0])?;
        for (j, w) in self.taps.iter().enumerate().skip(1) {
            let shift = j * self.dilation;
            if shift >= frames {
                break;
            }
            let delayed = x.narrow(1, 0, frames - shift)?.pad_with_zeros(1, shift, 0)?;
            acc = acc.add(&channel_scale(&delayed, w)?)?;
        }
        bias_add(&acc, &self.bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::VarStore;
    use candle_core::{DType, Device};

    fn seq(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    /// Direct loop implementation of the strided causal conv for comparison.
    fn conv_oracle(x: &Tensor, w: &[f64], b: &[f64], cin: usize, cout: usize, kt: usize, stride: usize) -> Vec<f64> {
        let (bs, t, f, _) = x.dims4().unwrap();
        let xv: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let get = |bi: usize, ti: isize, fi: isize, ci: usize| -> f64 {
            if ti < 0 || fi < 0 || fi >= f as isize {
                0.0
            } else {
                xv[((bi * t + ti as usize) * f + fi as usize) * cin + ci]
            }
        };
        let fo = if stride == 2 { f.div_ceil(2) } else { f };
        let mut out = Vec::new();
        for bi in 0..bs {
            for ti in 0..t {
                for fi in 0..fo {
                    for co in 0..cout {
                        let mut acc = b[co];
                        for j in 0..3 {
                            for dt in 0..kt {
                                for ci in 0..cin {
                                    // Feature layout: [freq tap][time tap][channel].
                                    let row = (j * kt + dt) * cin + ci;
                                    let src_t = ti as isize - (kt - 1 - dt) as isize;
                                    let src_f = (stride * fi + j) as isize - 1;
                                    acc += w[row * cout + co] * get(bi, src_t, src_f, ci);
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn strided_conv_matches_loop() {
        for (bins, stride, kt) in [(7, 2, 2), (8, 2, 1), (5, 1, 2)] {
            let store = VarStore::new(1, DType::F64);
            let vb = store.root();
            let conv = CausalConv2d::new(&vb, 3, 4, kt, stride).unwrap();
            let x = seq(&[2, 4, bins, 3]);
            let got: Vec<f64> = conv.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let w: Vec<f64> = store.get("weight").unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f64> = store.get("bias").unwrap().to_vec1().unwrap();
            let want = conv_oracle(&x, &w, &b, 3, 4, kt, stride);
            assert_eq!(got.len(), want.len());
            for (g, e) in got.iter().zip(&want) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strided_conv_output_sizes() {
        let store = VarStore::new(1, DType::F32);
        let conv = CausalConv2d::new(&store.root(), 1, 1, 1, 2).unwrap();
        let mut bins = 161;
        for want in [81, 41, 21, 11, 6] {
            let x = Tensor::zeros((1, 2, bins, 1), DType::F32, &Device::Cpu).unwrap();
            bins = conv.forward(&x).unwrap().dim(2).unwrap();
            assert_eq!(bins, want);
        }
    }

    #[test]
    fn up_conv_is_adjoint_of_strided_conv() {
        // <conv(x), y> == <x, up(y)> when both share kernel weights and have no bias.
        let store = VarStore::new(2, DType::F64);
        let vb = store.root();
        let (cin, cout, bins) = (2, 3, 9);
        let conv = CausalConv2d::new(&vb.pp("down"), cin, cout, 1, 2).unwrap();
        let up = CausalUpConv2d::new(&vb.pp("up"), cout, cin, 1).unwrap();
        let w = store.get("down.weight").unwrap();
        let wv: Vec<f64> = w.flatten_all().unwrap().to_vec1().unwrap();
        // down weight rows: [tap j][cin], cols cout. Up expects [cout] -> [cin] per tap.
        let tap = |j: usize| -> Vec<f64> {
            let mut m = vec![0.0; cout * cin];
            for ci in 0..cin {
                for co in 0..cout {
                    m[co * cin + ci] = wv[(j * cin + ci) * cout + co];
                }
            }
            m
        };
        let center = Tensor::from_vec(tap(1), (cout, cin), &Device::Cpu).unwrap();
        let sides: Vec<f64> = [tap(2), tap(0)].concat();
        let sides = Tensor::from_vec(sides, (2 * cout, cin), &Device::Cpu).unwrap();
        store.get("up.center.weight").unwrap().set(&center).unwrap();
        store.get("up.sides.weight").unwrap().set(&sides).unwrap();
        store.get("down.bias").unwrap().set(&Tensor::zeros(cout, DType::F64, &Device::Cpu).unwrap()).unwrap();
        store.get("up.bias").unwrap().set(&Tensor::zeros(cin, DType::F64, &Device::Cpu).unwrap()).unwrap();

        let x = seq(&[1, 3, bins, cin]);
        let y = seq(&[1, 3, bins.div_ceil(2), cout]).affine(0.7, 0.1).unwrap();
        let lhs: f64 = conv.forward(&x).unwrap().mul(&y).unwrap().sum_all().unwrap().to_scalar().unwrap();
        let rhs: f64 = up.forward(&y, bins).unwrap().mul(&x).unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn cumulative_norm_is_causal_and_matches_prefix_stats() {
        let store = VarStore::new(0, DType::F64);
        let norm = CumulativeNorm::new(&store.root(), 3).unwrap();
        let x = seq(&[1, 5, 3]);
        let y: Vec<f64> = norm.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let xv: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        for t in 0..5 {
            let prefix = &xv[..(t + 1) * 3];
            let mean = prefix.iter().sum::<f64>() / prefix.len() as f64;
            let var = prefix.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / prefix.len() as f64;
            for c in 0..3 {
                let want = (xv[t * 3 + c] - mean) / (var + NORM_EPS).sqrt();
                assert!((y[t * 3 + c] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dilated_depthwise_is_causal() {
        let store = VarStore::new(0, DType::F64);
        let conv = DilatedDepthwise::new(&store.root(), 2, 3, 2).unwrap();
        let x = seq(&[1, 8, 2]);
        let base: Vec<f64> = conv.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mut v: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        v[5 * 2] += 3.0;
        let x2 = Tensor::from_vec(v, (1, 8, 2), &Device::Cpu).unwrap();
        let pert: Vec<f64> = conv.forward(&x2).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(&base[..10], &pert[..10]);
        assert_ne!(base[10], pert[10]);
        assert_ne!(base[7 * 2], pert[7 * 2]);
    }
}
