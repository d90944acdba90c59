//! Synthetic speech-like and noise-like signals for small-scale runs.
//!
//! "Speech" is a harmonic series on a vibrato pitch contour, shaped by two formant
//! bumps and gated into syllables separated by pauses. "Noise" is resonator-filtered
//! Gaussian noise with a bursty envelope over a quieter floor.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{Dataset, MixtureSpec, DEFAULT_SEGMENT_SECONDS};
use crate::error::{Error, Result};
use crate::frontend::wav::{write_wav, WavEncoding};
use crate::frontend::{Waveform, SAMPLE_RATE};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub n_pairs: usize,
    pub seed: u64,
    pub seconds: f64,
    /// Inclusive integer SNR grid in dB.
    pub snr_min_db: i32,
    pub snr_max_db: i32,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_pairs: 20,
            seed: 0,
            seconds: 2.0,
            snr_min_db: -5,
            snr_max_db: 0,
        }
    }
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Writes `n_pairs` clean/noise WAV pairs and a manifest under `out_dir`, returning the
/// manifest path.
pub fn toy_corpus_generate(n_pairs: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    generate(
        &ToyConfig {
            n_pairs,
            seed,
            ..Default::default()
        },
        out_dir,
    )
}

pub fn generate(cfg: &ToyConfig, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    if cfg.n_pairs == 0 {
        return Err(Error::InvalidArgument("n_pairs must be at least 1".into()));
    }
    if !(cfg.seconds >= 0.1 && cfg.seconds.is_finite()) {
        return Err(Error::InvalidArgument(format!("toy signals need at least 0.1 s, got {}", cfg.seconds)));
    }
    if cfg.snr_min_db > cfg.snr_max_db {
        return Err(Error::InvalidArgument("snr_min_db exceeds snr_max_db".into()));
    }
    let out = out_dir.as_ref();
    for sub in ["clean", "noise"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let len = (cfg.seconds * SAMPLE_RATE as f64).round() as usize;
    let mut specs = Vec::with_capacity(cfg.n_pairs);
    for i in 0..cfg.n_pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x1000_0000_01B3).wrapping_add(i as u64));
        let clean = speech_like(len, &mut rng)?;
        let noise = noise_like(len, &mut rng)?;
        let clean_path = out.join("clean").join(format!("clean_{i:04}.wav"));
        let noise_path = out.join("noise").join(format!("noise_{i:04}.wav"));
        write_wav(&clean_path, &clean, WavEncoding::Float32)?;
        write_wav(&noise_path, &noise, WavEncoding::Float32)?;
        specs.push(MixtureSpec {
            clean_path,
            noise_path,
            snr_db: rng.random_range(cfg.snr_min_db..=cfg.snr_max_db) as f64,
            segment_seconds: DEFAULT_SEGMENT_SECONDS,
            seed: rng.random(),
        });
    }
    let manifest = out.join(MANIFEST_NAME);
    Dataset::write_manifest(&specs, &manifest)?;
    Ok(manifest)
}

/// Raised-cosine attack and release of `ramp` samples.
fn gate(n: usize, ramp: usize) -> impl Fn(usize) -> f64 {
    let ramp = ramp.max(1).min(n / 2).max(1);
    move |i| {
        let edge = i.min(n.saturating_sub(1 + i));
        if edge >= ramp {
            1.0
        } else {
            0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / ramp as f64).cos()
        }
    }
}

fn normalize(mut v: Vec<f64>, peak: f64) -> Result<Waveform> {
    let m = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if m > 0.0 {
        v.iter_mut().for_each(|x| *x *= peak / m);
    }
    Waveform::new(v.into_iter().map(|x| x as f32).collect())
}

pub fn speech_like(len: usize, rng: &mut impl Rng) -> Result<Waveform> {
    let fs = SAMPLE_RATE as f64;
    let f0 = rng.random_range(100.0..220.0);
    let glide = rng.random_range(-0.15..0.15);
    let vib_rate = rng.random_range(4.0..6.5);
    let vib_depth = rng.random_range(0.02..0.05);
    let formants = [rng.random_range(400.0..900.0), rng.random_range(1100.0..2600.0)];
    let mut env = vec![0.0f64; len];
    let mut pos = rng.random_range(0..len / 10 + 1);
    while pos < len {
        let syl = (rng.random_range(0.12..0.35) * fs) as usize;
        let end = (pos + syl).min(len);
        let g = gate(end - pos, (0.02 * fs) as usize);
        let level = rng.random_range(0.5..1.0);
        let am_rate = rng.random_range(3.0..5.0);
        for (k, e) in env[pos..end].iter_mut().enumerate() {
            let am = 0.75 + 0.25 * (TAU * am_rate * k as f64 / fs).sin();
            *e = level * g(k) * am;
        }
        pos = end + (rng.random_range(0.05..0.2) * fs) as usize;
    }
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(len);
    for (i, &e) in env.iter().enumerate() {
        let t = i as f64 / fs;
        let f = f0 * (1.0 + glide * t / (len as f64 / fs)) * (1.0 + vib_depth * (TAU * vib_rate * t).sin());
        phase = (phase + TAU * f / fs) % (TAU * 1e3);
        let mut v = 0.0;
        let mut h = 1.0;
        while h * f < 4000.0 {
            let hf = h * f;
            let shape: f64 = formants.iter().map(|&c| (-((hf - c) / 250.0).powi(2)).exp()).sum();
            v += (1.0 / h + 2.0 * shape) * (h * phase).sin();
            h += 1.0;
        }
        out.push(e * v);
    }
    normalize(out, 0.5)
}

pub fn noise_like(len: usize, rng: &mut impl Rng) -> Result<Waveform> {
    let fs = SAMPLE_RATE as f64;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let center = rng.random_range(300.0..5000.0);
    let q = rng.random_range(0.7..4.0);
    let tilt = rng.random_range(0.0..0.9);
    // Band-pass biquad.
    let w0 = TAU * center / fs;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2, mut lp) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut env = vec![0.2f64; len];
    let mut pos = 0;
    while pos < len {
        let burst = (rng.random_range(0.1..0.5) * fs) as usize;
        let end = (pos + burst).min(len);
        let g = gate(end - pos, (0.01 * fs) as usize);
        let level = rng.random_range(0.6..1.0);
        for (k, e) in env[pos..end].iter_mut().enumerate() {
            *e = 0.2 + (level - 0.2) * g(k);
        }
        pos = end + (rng.random_range(0.05..0.4) * fs) as usize;
    }
    let mut out = Vec::with_capacity(len);
    for &e in &env {
        let x: f64 = normal.sample(rng);
        let y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
        (x2, x1, y2, y1) = (x1, x, y1, y);
        lp = tilt * lp + (1.0 - tilt) * x;
        out.push(e * (y + 0.3 * lp));
    }
    normalize(out, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::mixture::synthesize_mixture;
    use crate::frontend::wav::read_wav;

    #[test]
    fn count_contract_and_determinism() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = ToyConfig {
            n_pairs: 3,
            seconds: 0.5,
            ..Default::default()
        };
        let ma = generate(&cfg, a.path()).unwrap();
        generate(&cfg, b.path()).unwrap();
        assert_eq!(fs::read_dir(a.path().join("clean")).unwrap().count(), 3);
        assert_eq!(fs::read_dir(a.path().join("noise")).unwrap().count(), 3);
        assert_eq!(fs::read_to_string(&ma).unwrap().lines().count(), 4);
        for sub in ["clean/clean_0001.wav", "noise/noise_0002.wav", MANIFEST_NAME] {
            assert_eq!(fs::read(a.path().join(sub)).unwrap(), fs::read(b.path().join(sub)).unwrap());
        }
    }

    #[test]
    fn pairs_mix_without_silence() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyConfig {
            n_pairs: 4,
            seconds: 0.5,
            ..Default::default()
        };
        generate(&cfg, dir.path()).unwrap();
        for i in 0..4 {
            let c = read_wav(dir.path().join(format!("clean/clean_{i:04}.wav"))).unwrap();
            let n = read_wav(dir.path().join(format!("noise/noise_{i:04}.wav"))).unwrap();
            for snr in -5..=0 {
                synthesize_mixture(&c, &n, snr as f64).unwrap();
            }
        }
    }

    #[test]
    fn zero_pairs_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(toy_corpus_generate(0, 0, dir.path()).is_err());
    }

    #[test]
    fn unwritable_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        fs::write(&file, b"x").unwrap();
        assert!(toy_corpus_generate(1, 0, file.join("sub")).is_err());
    }
}
