//! Evaluation-mode passes: validation loss, SI-SNR scoring, waveform enhancement.

use candle_core::DType;

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::frontend::{istft, stft, AnalysisConfig, Waveform};
use crate::loss::{unfolded_training_loss, LossWeights};
use crate::metrics::{sisnr, MetricReport, UtteranceScore};
use crate::nn::Network;

/// Enhances one utterance. The network is causal, so running it over the whole
/// spectrogram at once yields the same frames as a frame-by-frame pass.
pub fn enhance_waveform(network: &Network, noisy: &Waveform, analysis: &AnalysisConfig) -> Result<Waveform> {
    let x = stft(noisy, analysis)?.to_dtype(DType::F32)?;
    let y = network.enhance_spectrum(&x)?;
    istft(&y, analysis, noisy.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    /// Mean per-item training objective.
    pub loss: f64,
    pub report: MetricReport,
}

/// Scores every item of `set` one at a time on detached weights. Nothing is written
/// back to the network.
pub fn validate(network: &Network, set: &Dataset, weights: &LossWeights, analysis: &AnalysisConfig) -> Result<Validation> {
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    let mut report = MetricReport::default();
    for i in 0..set.len() {
        let batch = Batch::collate(vec![set.example(i)?], analysis)?;
        let trace = network.eval_model().forward(&batch.mixture)?;
        let loss = unfolded_training_loss(&trace, &batch.clean, &batch.noise, weights)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss of {}", batch.ids[0])));
        }
        total += loss;
        let ex = &batch.examples[0];
        let enhanced = istft(&trace.fused, analysis, ex.mixture.len())?;
        report.push(UtteranceScore {
            id: ex.id.clone(),
            noisy_sisnr: sisnr(&ex.mixture, &ex.clean)?,
            enhanced_sisnr: sisnr(&enhanced, &ex.clean)?,
        });
    }
    Ok(Validation {
        loss: total / set.len() as f64,
        report,
    })
}

/// SI-SNR of noisy and enhanced audio for every item, without the loss.
pub fn evaluate_dataset(network: &Network, set: &Dataset, analysis: &AnalysisConfig) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for i in 0..set.len() {
        let ex = set.example(i)?;
        let enhanced = enhance_waveform(network, &ex.mixture, analysis)?;
        report.push(UtteranceScore {
            id: ex.id.clone(),
            noisy_sisnr: sisnr(&ex.mixture, &ex.clean)?,
            enhanced_sisnr: sisnr(&enhanced, &ex.clean)?,
        });
    }
    Ok(report)
}
