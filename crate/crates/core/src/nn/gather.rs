//! Patch extraction for channels-last 2D convolutions as a single differentiable op.
//!
//! For `[B, T, F, C]` input the output is `[B, T, F_out, J·K_t·C]` with
//! `out[b, t, o, (j·K_t + dt)·C + c] = x[b, t + dt − (K_t − 1), o·stride + offset_j, c]`,
//! zero whenever the source index falls outside the input.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct Taps {
    pub time: usize,
    pub stride: usize,
    pub offsets: Vec<isize>,
    pub out_bins: usize,
}

impl Taps {
    fn width(&self, channels: usize) -> usize {
        self.offsets.len() * self.time * channels
    }

    /// Calls `f(dst_offset, src_offset)` for every copied channel run.
    fn for_each_run(&self, dims: [usize; 4], mut f: impl FnMut(usize, usize)) {
        let [b, t, bins, c] = dims;
        let width = self.width(c);
        for bi in 0..b {
            for ti in 0..t {
                for o in 0..self.out_bins {
                    let dst_row = ((bi * t + ti) * self.out_bins + o) * width;
                    for (j, &off) in self.offsets.iter().enumerate() {
                        let src_f = (o * self.stride) as isize + off;
                        if src_f < 0 || src_f as usize >= bins {
                            continue;
                        }
                        for dt in 0..self.time {
                            let src_t = ti as isize + dt as isize - (self.time as isize - 1);
                            if src_t < 0 {
                                continue;
                            }
                            let src = ((bi * t + src_t as usize) * bins + src_f as usize) * c;
                            f(dst_row + (j * self.time + dt) * c, src);
                        }
                    }
                }
            }
        }
    }

    fn gather<T: WithDType>(&self, x: &[T], dims: [usize; 4]) -> Vec<T> {
        let [b, t, _, c] = dims;
        let mut out = vec![T::zero(); b * t * self.out_bins * self.width(c)];
        self.for_each_run(dims, |dst, src| out[dst..dst + c].copy_from_slice(&x[src..src + c]));
        out
    }

    fn scatter<T: WithDType>(&self, g: &[T], dims: [usize; 4]) -> Vec<T> {
        let [b, t, bins, c] = dims;
        let mut out = vec![T::zero(); b * t * bins * c];
        self.for_each_run(dims, |dst, src| {
            for (o, &v) in out[src..src + c].iter_mut().zip(&g[dst..dst + c]) {
                *o += v;
            }
        });
        out
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 {
            return Err(Error::shape("taps", "[B, T, F, C]", format!("{:?}", x.dims())));
        }
        Ok(x.contiguous()?.apply_op1(self.clone())?)
    }
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => candle_core::bail!("taps expects a contiguous input"),
    }
}

fn dims4(shape: &Shape) -> candle_core::Result<[usize; 4]> {
    let (b, t, f, c) = shape.dims4()?;
    Ok([b, t, f, c])
}

impl CustomOp1 for Taps {
    fn name(&self) -> &'static str {
        "taps"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = dims4(l.shape())?;
        let out_shape = Shape::from((dims[0], dims[1], self.out_bins, self.width(dims[3])));
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(self.gather(contiguous::<f32>(s, l)?, dims)),
            CpuStorage::F64(_) => CpuStorage::F64(self.gather(contiguous::<f64>(s, l)?, dims)),
            other => candle_core::bail!("taps: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, out_shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let adjoint = TapsAdjoint {
            taps: self.clone(),
            input: dims4(arg.shape())?,
        };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&adjoint)?))
    }
}

/// Transpose of [`Taps`]: accumulates patch gradients back onto the input grid.
struct TapsAdjoint {
    taps: Taps,
    input: [usize; 4],
}

impl CustomOp1 for TapsAdjoint {
    fn name(&self) -> &'static str {
        "taps-adjoint"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(self.taps.scatter(contiguous::<f32>(s, l)?, self.input)),
            CpuStorage::F64(_) => CpuStorage::F64(self.taps.scatter(contiguous::<f64>(s, l)?, self.input)),
            other => candle_core::bail!("taps-adjoint: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, Shape::from(self.input.to_vec())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn gather_matches_direct_indexing() {
        let (b, t, f, c) = (2, 4, 5, 3);
        let v: Vec<f64> = (0..b * t * f * c).map(|i| i as f64).collect();
        let x = Tensor::from_vec(v.clone(), (b, t, f, c), &Device::Cpu).unwrap();
        let taps = Taps {
            time: 2,
            stride: 2,
            offsets: vec![-1, 0, 1],
            out_bins: 3,
        };
        let y: Vec<f64> = taps.apply(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let width = 3 * 2 * c;
        for bi in 0..b {
            for ti in 0..t {
                for o in 0..3 {
                    for j in 0..3 {
                        for dt in 0..2 {
                            for ci in 0..c {
                                let st = ti as isize + dt as isize - 1;
                                let sf = (2 * o + j) as isize - 1;
                                let want = if st < 0 || sf < 0 || sf >= f as isize {
                                    0.0
                                } else {
                                    v[((bi * t + st as usize) * f + sf as usize) * c + ci]
                                };
                                let got = y[((bi * t + ti) * 3 + o) * width + (j * 2 + dt) * c + ci];
                                assert_eq!(got, want);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn backward_is_the_adjoint() {
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (1, 3, 6, 2), &Device::Cpu).unwrap()).unwrap();
        let taps = Taps {
            time: 2,
            stride: 1,
            offsets: vec![0, 1],
            out_bins: 6,
        };
        let y = taps.apply(x.as_tensor()).unwrap();
        let w = Tensor::randn(0f64, 1.0, y.dims(), &Device::Cpu).unwrap();
        let grads = y.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        let gx = grads.get(x.as_tensor()).unwrap();
        // <taps(e_i), w> for each unit vector e_i
        let n = x.elem_count();
        let gx: Vec<f64> = gx.flatten_all().unwrap().to_vec1().unwrap();
        for i in 0..n {
            let mut e = vec![0.0f64; n];
            e[i] = 1.0;
            let e = Tensor::from_vec(e, (1, 3, 6, 2), &Device::Cpu).unwrap();
            let dot: f64 = taps.apply(&e).unwrap().mul(&w).unwrap().sum_all().unwrap().to_scalar().unwrap();
            assert!((dot - gx[i]).abs() < 1e-12);
        }
    }
}
