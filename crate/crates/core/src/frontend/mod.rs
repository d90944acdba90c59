//! Waveform/spectrogram conversion and spectral power compression.
//!
//! Analysis uses a periodic Hann window with center (reflect) padding of half a
//! window on both ends, so frame `l` is centered on sample `l * hop`. Synthesis is
//! weighted overlap-add normalized by the summed squared window, which makes the
//! round trip exact wherever at least one frame covers a sample.

mod spectrogram;
pub mod wav;

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use spectrogram::ComplexSpectrogram;

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio at 16 kHz.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("waveform must have at least one sample".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Self { samples })
    }

    pub fn zeros(len: usize) -> Result<Self> {
        Self::new(vec![0.0; len])
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / self.samples.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub window_length: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Default for AnalysisConfig {
    /// 20 ms window, 50% overlap, 320-point FFT at 16 kHz.
    fn default() -> Self {
        Self {
            window_length: 320,
            hop: 160,
            fft_size: 320,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_length < 2 || !self.window_length.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "window_length must be even and >= 2, got {}",
                self.window_length
            )));
        }
        if self.hop * 2 != self.window_length {
            return Err(Error::InvalidArgument(format!(
                "hop must be window_length / 2 ({}), got {}",
                self.window_length / 2,
                self.hop
            )));
        }
        if self.fft_size != self.window_length {
            return Err(Error::InvalidArgument(format!(
                "fft_size must equal window_length ({}), got {}",
                self.window_length, self.fft_size
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Periodic Hann window of `window_length` taps.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_length as f64;
        (0..self.window_length)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos())
            .collect()
    }

    fn pad(&self) -> usize {
        self.window_length / 2
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// Longest signal that `frames` frames can reconstruct.
    pub fn reconstructible_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.window_length - self.pad()
        }
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(n: usize) -> Plans {
    let mut planner = FftPlanner::<f64>::new();
    Plans {
        forward: planner.plan_fft_forward(n),
        inverse: planner.plan_fft_inverse(n),
    }
}

/// Numpy-style reflect padding (edge sample not repeated).
fn reflect_pad(x: &[f32], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((0..pad).map(|i| x[pad - i] as f64));
    out.extend(x.iter().map(|&s| s as f64));
    out.extend((0..pad).map(|j| x[n - 2 - j] as f64));
    out
}

/// Forward STFT. Output is a single-item batch `[1, 2, K, L]` in `f64`.
pub fn stft(w: &Waveform, cfg: &AnalysisConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    if w.len() < cfg.window_length {
        return Err(Error::SignalTooShort {
            len: w.len(),
            needed: cfg.window_length,
        });
    }
    let n_fft = cfg.fft_size;
    let bins = cfg.bins();
    let frames = cfg.frames_for(w.len());
    let window = cfg.window();
    let padded = reflect_pad(w.samples(), cfg.pad());
    let fft = plans(n_fft).forward;

    let mut data = vec![0f64; 2 * bins * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for l in 0..frames {
        let start = l * cfg.hop;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, c) in buf.iter().take(bins).enumerate() {
            data[k * frames + l] = c.re;
            data[bins * frames + k * frames + l] = c.im;
        }
    }
    let t = Tensor::from_vec(data, (1, 2, bins, frames), &Device::Cpu)?;
    ComplexSpectrogram::new(t)
}

/// Inverse STFT of a single-item spectrogram, trimmed to `out_length` samples.
pub fn istft(spec: &ComplexSpectrogram, cfg: &AnalysisConfig, out_length: usize) -> Result<Waveform> {
    cfg.validate()?;
    if spec.batch() != 1 {
        return Err(Error::shape("istft", "batch of 1", format!("batch of {}", spec.batch())));
    }
    if spec.bins() != cfg.bins() {
        return Err(Error::shape(
            "istft",
            format!("{} bins", cfg.bins()),
            format!("{} bins", spec.bins()),
        ));
    }
    let frames = spec.frames();
    let max_len = cfg.reconstructible_len(frames);
    if out_length == 0 || out_length > max_len {
        return Err(Error::InvalidArgument(format!(
            "out_length {out_length} outside 1..={max_len} for {frames} frames"
        )));
    }
    let n_fft = cfg.fft_size;
    let bins = cfg.bins();
    let hop = cfg.hop;
    let window = cfg.window();
    let data: Vec<f64> = spec.tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let ifft = plans(n_fft).inverse;

    let total = (frames - 1) * hop + n_fft;
    let mut acc = vec![0f64; total];
    let mut norm = vec![0f64; total];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let scale = 1.0 / n_fft as f64;
    for l in 0..frames {
        for k in 0..bins {
            let re = data[k * frames + l];
            let im = data[bins * frames + k * frames + l];
            // DC and Nyquist must be real for a real output frame.
            let c = if k == 0 || k == n_fft / 2 {
                Complex::new(re, 0.0)
            } else {
                Complex::new(re, im)
            };
            buf[k] = c;
            if k != 0 && k != n_fft / 2 {
                buf[n_fft - k] = c.conj();
            }
        }
        ifft.process(&mut buf);
        let start = l * hop;
        for i in 0..n_fft {
            acc[start + i] += buf[i].re * scale * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    let pad = cfg.pad();
    let samples = (0..out_length)
        .map(|i| {
            let d = norm[i + pad];
            if d > f64::EPSILON {
                (acc[i + pad] / d) as f32
            } else {
                0.0
            }
        })
        .collect();
    Waveform::new(samples)
}

/// Magnitude compression `|z| -> |z|^beta` with phase preserved. Zero bins stay zero.
pub fn power_compress(spec: &ComplexSpectrogram, beta: f64) -> Result<ComplexSpectrogram> {
    ComplexSpectrogram::new(compress_planes(spec.tensor(), beta, 0.0)?)
}

/// Power compression on a `[B, 2, K, L]` tensor.
///
/// With `eps == 0` the result is exact and zero bins map to zero; a positive `eps`
/// computes `z * (|z|^2 + eps)^((beta - 1) / 2)`, which keeps gradients bounded near
/// the origin.
pub(crate) fn compress_planes(planes: &Tensor, beta: f64, eps: f64) -> Result<Tensor> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidArgument(format!("beta must lie in (0, 1], got {beta}")));
    }
    if beta == 1.0 {
        return Ok(planes.clone());
    }
    let mag2 = planes.sqr()?.sum_keepdim(1)?;
    let guarded = if eps > 0.0 {
        (mag2 + eps)?
    } else {
        let zero = mag2.eq(0.0)?.to_dtype(mag2.dtype())?;
        (mag2 + zero)?
    };
    let scale = guarded.powf((beta - 1.0) / 2.0)?;
    Ok(planes.broadcast_mul(&scale)?)
}
