use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// Batch of complex spectra stored as real/imaginary planes, shape `[B, 2, K, L]`
/// (plane 0 real, plane 1 imaginary; `K` bins, `L` frames).
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram(Tensor);

impl ComplexSpectrogram {
    pub fn new(planes: Tensor) -> Result<Self> {
        match planes.dims() {
            [_, 2, _, _] => Ok(Self(planes)),
            d => Err(Error::shape("ComplexSpectrogram", "[B, 2, K, L]", format!("{d:?}"))),
        }
    }

    /// Builds from separate `[B, K, L]` real and imaginary parts.
    pub fn from_parts(re: &Tensor, im: &Tensor) -> Result<Self> {
        if re.dims() != im.dims() || re.rank() != 3 {
            return Err(Error::shape(
                "ComplexSpectrogram::from_parts",
                "two [B, K, L] tensors",
                format!("{:?} and {:?}", re.dims(), im.dims()),
            ));
        }
        Self::new(Tensor::stack(&[re, im], 1)?)
    }

    pub fn zeros(batch: usize, bins: usize, frames: usize, dtype: DType) -> Result<Self> {
        Self::new(Tensor::zeros((batch, 2, bins, frames), dtype, &candle_core::Device::Cpu)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn batch(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn bins(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn frames(&self) -> usize {
        self.0.dims()[3]
    }

    pub fn dtype(&self) -> DType {
        self.0.dtype()
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self(self.0.to_dtype(dtype)?))
    }

    pub fn re(&self) -> Result<Tensor> {
        Ok(self.0.narrow(1, 0, 1)?.squeeze(1)?)
    }

    pub fn im(&self) -> Result<Tensor> {
        Ok(self.0.narrow(1, 1, 1)?.squeeze(1)?)
    }

    /// `[B, K, L]` magnitudes. `eps` is added under the square root; keep it positive
    /// when the result is differentiated.
    pub fn magnitude(&self, eps: f64) -> Result<Tensor> {
        let m2 = self.0.sqr()?.sum(1)?;
        Ok((m2 + eps)?.sqrt()?)
    }

    pub fn item(&self, index: usize) -> Result<Self> {
        if index >= self.batch() {
            return Err(Error::InvalidArgument(format!(
                "batch index {index} out of range for batch of {}",
                self.batch()
            )));
        }
        Ok(Self(self.0.narrow(0, index, 1)?))
    }

    /// First `frames` frames.
    pub fn truncate_frames(&self, frames: usize) -> Result<Self> {
        Ok(Self(self.0.narrow(3, 0, frames.min(self.frames()))?))
    }

    /// Concatenates along the batch axis, zero-padding frames to the longest item.
    pub fn stack(items: &[ComplexSpectrogram]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero spectrograms".into()))?;
        let frames = items.iter().map(|s| s.frames()).max().unwrap_or(0);
        let mut padded = Vec::with_capacity(items.len());
        for s in items {
            if s.bins() != first.bins() {
                return Err(Error::shape(
                    "ComplexSpectrogram::stack",
                    format!("{} bins", first.bins()),
                    format!("{} bins", s.bins()),
                ));
            }
            padded.push(s.0.pad_with_zeros(3, 0, frames - s.frames())?);
        }
        Self::new(Tensor::cat(&padded, 0)?)
    }

    pub fn ensure_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.0.dims() != other.0.dims() {
            return Err(Error::shape(op, format!("{:?}", self.0.dims()), format!("{:?}", other.0.dims())));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.ensure_same_shape(other, "add")?;
        Ok(Self((&self.0 + &other.0)?))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.ensure_same_shape(other, "sub")?;
        Ok(Self((&self.0 - &other.0)?))
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        Ok(Self((&self.0 * factor)?))
    }

    pub fn detach(&self) -> Self {
        Self(self.0.detach())
    }

    /// Flattened values in `f64`, plane-major.
    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.0.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
    }
}
