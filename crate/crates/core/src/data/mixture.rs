//! Additive mixing at a prescribed SNR.

use rand::Rng;

use crate::error::{Error, Result};
use crate::frontend::Waveform;

/// Powers below this are treated as silence.
const SILENCE_POWER: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub mixture: Waveform,
    /// `mixture − noise`, computed in the sample format so the sum is exact.
    pub clean: Waveform,
    pub noise: Waveform,
}

/// Scales `noise` so that the clean-to-noise power ratio over the whole segment is
/// `snr_db`, then mixes.
pub fn synthesize_mixture(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Mixture> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr_db must be finite, got {snr_db}")));
    }
    if clean.len() != noise.len() {
        return Err(Error::shape(
            "synthesize_mixture",
            format!("noise of {} samples", clean.len()),
            format!("{} samples", noise.len()),
        ));
    }
    let pc = clean.power();
    let pn = noise.power();
    if pc < SILENCE_POWER {
        return Err(Error::Silent { what: "clean segment" });
    }
    if pn < SILENCE_POWER {
        return Err(Error::Silent { what: "noise segment" });
    }
    let gain = (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f32> = noise.samples().iter().map(|&v| (v as f64 * gain) as f32).collect();
    let mixture: Vec<f32> = clean.samples().iter().zip(&scaled).map(|(c, n)| c + n).collect();
    let aligned: Vec<f32> = mixture.iter().zip(&scaled).map(|(m, n)| m - n).collect();
    Ok(Mixture {
        mixture: Waveform::new(mixture)?,
        clean: Waveform::new(aligned)?,
        noise: Waveform::new(scaled)?,
    })
}

/// Measured SNR in dB between two equal-length signals.
pub fn measure_snr(clean: &Waveform, noise: &Waveform) -> Result<f64> {
    let pn = noise.power();
    if pn < SILENCE_POWER {
        return Err(Error::Silent { what: "noise segment" });
    }
    Ok(10.0 * (clean.power() / pn).log10())
}

/// Random `len`-sample excerpt, or the whole signal when it is shorter.
pub fn crop(w: &Waveform, len: usize, rng: &mut impl Rng) -> Result<Waveform> {
    if w.len() <= len {
        return Ok(w.clone());
    }
    let start = rng.random_range(0..=w.len() - len);
    Waveform::new(w.samples()[start..start + len].to_vec())
}

/// `len` samples read circularly from a random offset, tiling short noise.
pub fn fit_noise(noise: &Waveform, len: usize, rng: &mut impl Rng) -> Result<Waveform> {
    let src = noise.samples();
    let offset = rng.random_range(0..src.len());
    Waveform::new((0..len).map(|i| src[(offset + i) % src.len()]).collect())
}
