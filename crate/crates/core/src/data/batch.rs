//! Batch assembly and background prefetch.

use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use candle_core::DType;

use super::manifest::{Dataset, Example};
use crate::error::Result;
use crate::frontend::{stft, AnalysisConfig, ComplexSpectrogram};
use crate::loss::FrameMask;

/// Spectra of several examples, zero-padded to a common frame count.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub mixture: ComplexSpectrogram,
    pub clean: ComplexSpectrogram,
    pub noise: ComplexSpectrogram,
    pub mask: FrameMask,
    pub examples: Vec<Example>,
}

impl Batch {
    pub fn collate(examples: Vec<Example>, cfg: &AnalysisConfig) -> Result<Self> {
        let mut mix = Vec::with_capacity(examples.len());
        let mut clean = Vec::with_capacity(examples.len());
        let mut noise = Vec::with_capacity(examples.len());
        for ex in &examples {
            mix.push(stft(&ex.mixture, cfg)?.to_dtype(DType::F32)?);
            clean.push(stft(&ex.clean, cfg)?.to_dtype(DType::F32)?);
            noise.push(stft(&ex.noise, cfg)?.to_dtype(DType::F32)?);
        }
        let lengths: Vec<usize> = mix.iter().map(ComplexSpectrogram::frames).collect();
        let frames = lengths.iter().copied().max().unwrap_or(0);
        Ok(Self {
            ids: examples.iter().map(|e| e.id.clone()).collect(),
            mixture: ComplexSpectrogram::stack(&mix)?,
            clean: ComplexSpectrogram::stack(&clean)?,
            noise: ComplexSpectrogram::stack(&noise)?,
            mask: FrameMask::new(lengths, frames)?,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn assemble(dataset: &Dataset, indices: &[usize], cfg: &AnalysisConfig) -> Result<Batch> {
    let examples = indices.iter().map(|&i| dataset.example(i)).collect::<Result<Vec<_>>>()?;
    Batch::collate(examples, cfg)
}

/// Iterates batches over `order`, synthesizing up to `depth` batches ahead on a worker
/// thread. With `depth == 0` batches are built on the calling thread.
pub struct Batches {
    source: Source,
}

enum Source {
    Inline {
        dataset: Arc<Dataset>,
        chunks: std::vec::IntoIter<Vec<usize>>,
        cfg: AnalysisConfig,
    },
    Worker {
        rx: Option<Receiver<Result<Batch>>>,
        handle: Option<JoinHandle<()>>,
    },
}

impl Batches {
    pub fn new(dataset: Arc<Dataset>, order: &[usize], batch_size: usize, cfg: AnalysisConfig, depth: usize) -> Self {
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
        if depth == 0 {
            return Self {
                source: Source::Inline {
                    dataset,
                    chunks: chunks.into_iter(),
                    cfg,
                },
            };
        }
        let (tx, rx) = sync_channel(depth);
        let handle = std::thread::spawn(move || {
            for chunk in chunks {
                let batch = assemble(&dataset, &chunk, &cfg);
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });
        Self {
            source: Source::Worker {
                rx: Some(rx),
                handle: Some(handle),
            },
        }
    }
}

impl Iterator for Batches {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        match &mut self.source {
            Source::Inline { dataset, chunks, cfg } => chunks.next().map(|c| assemble(dataset, &c, cfg)),
            Source::Worker { rx, .. } => rx.as_ref()?.recv().ok(),
        }
    }
}

impl Drop for Batches {
    fn drop(&mut self) {
        if let Source::Worker { rx, handle } = &mut self.source {
            // Closing the channel first unblocks a worker waiting to send.
            drop(rx.take());
            if let Some(h) = handle.take() {
                let _ = h.join();
            }
        }
    }
}
