//! Dense 2D matrix product used by every linear projection.
//!
//! With the `openblas` feature the product runs through the system CBLAS library;
//! otherwise it falls back to the tensor library's built-in kernel.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// `[m, k] × [k, n] → [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{k}, _] right operand"), format!("[{k2}, {n}]")));
    }
    if m == 0 || n == 0 {
        return Ok(Tensor::zeros((m, n), a.dtype(), a.device())?);
    }
    imp::matmul(a, b)
}

#[cfg(not(feature = "openblas"))]
mod imp {
    use super::*;

    pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok(a.matmul(b)?)
    }
}

#[cfg(feature = "openblas")]
mod imp {
    extern crate openblas_src;

    use super::*;
    use candle_core::backend::BackendStorage;
    use candle_core::{CpuStorage, CustomOp2, Layout, Shape};
    use cblas_sys::{CBLAS_LAYOUT, CBLAS_TRANSPOSE};

    /// `C = op(A) · op(B)` on row-major contiguous operands.
    #[derive(Debug, Clone, Copy)]
    struct Gemm {
        trans_a: bool,
        trans_b: bool,
    }

    fn contiguous<'a, T: candle_core::WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
        match l.contiguous_offsets() {
            Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
            None => candle_core::bail!("gemm expects contiguous operands"),
        }
    }

    fn flag(t: bool) -> CBLAS_TRANSPOSE {
        if t {
            CBLAS_TRANSPOSE::CblasTrans
        } else {
            CBLAS_TRANSPOSE::CblasNoTrans
        }
    }

    impl Gemm {
        /// `(m, k, n)` of the product given the stored operand shapes.
        fn sizes(&self, la: &Layout, lb: &Layout) -> candle_core::Result<(usize, usize, usize)> {
            let (a0, a1) = la.shape().dims2()?;
            let (b0, b1) = lb.shape().dims2()?;
            let (m, k) = if self.trans_a { (a1, a0) } else { (a0, a1) };
            let (kb, n) = if self.trans_b { (b1, b0) } else { (b0, b1) };
            if k != kb {
                candle_core::bail!("gemm: inner dimensions {k} and {kb} differ");
            }
            Ok((m, k, n))
        }
    }

    impl CustomOp2 for Gemm {
        fn name(&self) -> &'static str {
            "gemm"
        }

        fn cpu_fwd(&self, sa: &CpuStorage, la: &Layout, sb: &CpuStorage, lb: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
            let (m, k, n) = self.sizes(la, lb)?;
            let lda = la.shape().dims2()?.1 as i32;
            let ldb = lb.shape().dims2()?.1 as i32;
            let (ta, tb) = (flag(self.trans_a), flag(self.trans_b));
            let (mi, ki, ni) = (m as i32, k as i32, n as i32);
            let out = match (sa, sb) {
                (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                    let (a, b) = (contiguous::<f32>(sa, la)?, contiguous::<f32>(sb, lb)?);
                    let mut c = vec![0f32; m * n];
                    // SAFETY: slice lengths match the row-major shapes passed to CBLAS.
                    unsafe {
                        cblas_sys::cblas_sgemm(
                            CBLAS_LAYOUT::CblasRowMajor, ta, tb, mi, ni, ki, 1.0, a.as_ptr(), lda, b.as_ptr(), ldb, 0.0,
                            c.as_mut_ptr(), ni,
                        );
                    }
                    CpuStorage::F32(c)
                }
                (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                    let (a, b) = (contiguous::<f64>(sa, la)?, contiguous::<f64>(sb, lb)?);
                    let mut c = vec![0f64; m * n];
                    // SAFETY: as above.
                    unsafe {
                        cblas_sys::cblas_dgemm(
                            CBLAS_LAYOUT::CblasRowMajor, ta, tb, mi, ni, ki, 1.0, a.as_ptr(), lda, b.as_ptr(), ldb, 0.0,
                            c.as_mut_ptr(), ni,
                        );
                    }
                    CpuStorage::F64(c)
                }
                (x, y) => candle_core::bail!("gemm: unsupported dtypes {:?}, {:?}", x.dtype(), y.dtype()),
            };
            Ok((out, Shape::from((m, n))))
        }

        fn bwd(
            &self,
            a: &Tensor,
            b: &Tensor,
            _res: &Tensor,
            grad: &Tensor,
        ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
            if self.trans_a || self.trans_b {
                candle_core::bail!("gemm: gradients are only defined for the plain product");
            }
            let g = grad.contiguous()?;
            let da = g.apply_op2_no_bwd(b, &Gemm { trans_a: false, trans_b: true })?;
            let db = a.apply_op2_no_bwd(&g, &Gemm { trans_a: true, trans_b: false })?;
            Ok((Some(da), Some(db)))
        }
    }

    mod kernels {
        use std::ffi::{c_char, CStr};
        use std::sync::Once;

        extern "C" {
            fn openblas_get_corename() -> *const c_char;
            fn gotoblas_dynamic_init();
            fn gotoblas_dynamic_quit();
        }

        static SELECT: Once = Once::new();

        /// Some virtualised CPUs report a generic model, and OpenBLAS then falls back to
        /// its slowest x86-64 kernels. Re-select by instruction set in that case unless
        /// the user pinned a core type.
        pub fn select() {
            SELECT.call_once(|| {
                if std::env::var_os("OPENBLAS_CORETYPE").is_some() {
                    return;
                }
                // SAFETY: returns a static NUL-terminated string.
                let name = unsafe { CStr::from_ptr(openblas_get_corename()) };
                if !name.to_string_lossy().eq_ignore_ascii_case("prescott") {
                    return;
                }
                let wanted = best_core();
                if let Some(core) = wanted {
                    log::debug!("OpenBLAS detected a generic CPU; using {core} kernels");
                    std::env::set_var("OPENBLAS_CORETYPE", core);
                    // SAFETY: runs once, before this process issues any BLAS call of its own.
                    unsafe {
                        gotoblas_dynamic_quit();
                        gotoblas_dynamic_init();
                    }
                }
            });
        }

        #[cfg(target_arch = "x86_64")]
        fn best_core() -> Option<&'static str> {
            if is_x86_feature_detected!("avx512f")
                && is_x86_feature_detected!("avx512bw")
                && is_x86_feature_detected!("avx512dq")
                && is_x86_feature_detected!("avx512vl")
            {
                Some("SkylakeX")
            } else if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                Some("Haswell")
            } else {
                None
            }
        }

        #[cfg(not(target_arch = "x86_64"))]
        fn best_core() -> Option<&'static str> {
            None
        }
    }

    pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::select();
        let plain = Gemm {
            trans_a: false,
            trans_b: false,
        };
        Ok(a.contiguous()?.apply_op2(&b.contiguous()?, plain)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn matches_builtin_product_and_gradients() {
        let a = Var::from_tensor(&Tensor::randn(0f64, 1.0, (7, 5), &Device::Cpu).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f64, 1.0, (5, 3), &Device::Cpu).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 1.0, (7, 3), &Device::Cpu).unwrap();
        let got = matmul(a.as_tensor(), b.as_tensor()).unwrap();
        let want = a.as_tensor().matmul(b.as_tensor()).unwrap();
        let diff: f64 = got.sub(&want).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(diff < 1e-12);
        let g1 = got.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = want.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&a, &b] {
            let d: f64 = g1
                .get(v.as_tensor())
                .unwrap()
                .sub(g2.get(v.as_tensor()).unwrap())
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar()
                .unwrap();
            assert!(d < 1e-12);
        }
    }

    #[test]
    fn rejects_inner_mismatch() {
        let a = Tensor::zeros((2, 3), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(matmul(&a, &a).is_err());
    }
}
