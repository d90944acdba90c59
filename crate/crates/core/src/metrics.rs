//! Scale-invariant SNR and evaluation reports.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::frontend::Waveform;

pub const SISNR_EPS: f64 = 1e-8;

/// SI-SNR in dB of `est` against `reference`.
pub fn sisnr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    sisnr_slices(est.samples(), reference.samples())
}

pub fn sisnr_slices(est: &[f32], reference: &[f32]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::shape(
            "sisnr",
            format!("{} samples", reference.len()),
            format!("{} samples", est.len()),
        ));
    }
    if est.is_empty() {
        return Err(Error::InvalidArgument("sisnr of empty signals".into()));
    }
    let n = est.len() as f64;
    let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let (me, mr) = (mean(est), mean(reference));
    let (mut dot, mut rr) = (0.0, 0.0);
    for (&e, &r) in est.iter().zip(reference) {
        let (e, r) = (e as f64 - me, r as f64 - mr);
        dot += e * r;
        rr += r * r;
    }
    if rr == 0.0 {
        return Err(Error::Silent { what: "sisnr reference" });
    }
    let alpha = dot / rr;
    let (mut target, mut noise) = (0.0, 0.0);
    for (&e, &r) in est.iter().zip(reference) {
        let t = alpha * (r as f64 - mr);
        let d = (e as f64 - me) - t;
        target += t * t;
        noise += d * d;
    }
    Ok(10.0 * (target / (noise + SISNR_EPS)).log10())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtteranceScore {
    pub id: String,
    pub noisy_sisnr: f64,
    pub enhanced_sisnr: f64,
}

impl UtteranceScore {
    pub fn improvement(&self) -> f64 {
        self.enhanced_sisnr - self.noisy_sisnr
    }
}

/// Per-utterance SI-SNR scores of one evaluation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub rows: Vec<UtteranceScore>,
}

impl MetricReport {
    pub fn push(&mut self, row: UtteranceScore) {
        self.rows.push(row);
    }

    pub fn mean_noisy(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.noisy_sisnr))
    }

    pub fn mean_enhanced(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.enhanced_sisnr))
    }

    pub fn mean_improvement(&self) -> f64 {
        mean(self.rows.iter().map(UtteranceScore::improvement))
    }

    /// Aligned plain-text table, one line per utterance plus a mean line.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.id.len()).max().unwrap_or(0).max(4);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>10}  {:>10}  {:>10}", "item", "noisy_dB", "enh_dB", "delta_dB");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>10.3}  {:>10.3}  {:>10.3}",
                r.id,
                r.noisy_sisnr,
                r.enhanced_sisnr,
                r.improvement()
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>10.3}  {:>10.3}  {:>10.3}",
            "mean",
            self.mean_noisy(),
            self.mean_enhanced(),
            self.mean_improvement()
        );
        out
    }

    /// `key=value` lines for scripts.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "items={}", self.rows.len());
        let _ = writeln!(out, "mean_noisy_sisnr={}", self.mean_noisy());
        let _ = writeln!(out, "mean_enhanced_sisnr={}", self.mean_enhanced());
        let _ = writeln!(out, "mean_sisnr_improvement={}", self.mean_improvement());
        for r in &self.rows {
            let _ = writeln!(out, "{}.noisy_sisnr={}", r.id, r.noisy_sisnr);
            let _ = writeln!(out, "{}.enhanced_sisnr={}", r.id, r.enhanced_sisnr);
        }
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}
