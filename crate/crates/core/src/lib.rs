//! Deep-unfolding speech enhancement: a MAP-derived iterative estimator whose prior
//! gradients are predicted by networks.

pub mod config;
pub mod data;
pub mod error;
pub mod frontend;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod signal;
pub mod train;
pub mod unfold;

pub use config::{Overrides, RunConfig};
pub use error::{Error, Result};
pub use data::{Batch, Dataset, MixtureSpec};
pub use frontend::{istft, power_compress, stft, AnalysisConfig, ComplexSpectrogram, Waveform};
pub use loss::{compressed_spectral_loss, unfolded_training_loss, FrameMask, LossWeights};
pub use metrics::sisnr;
pub use nn::{FusionMode, Model, ModelConfig, Network};
pub use signal::{GainMask, GradientSet, ParameterSet, ResidualSpectrum};
pub use train::{Checkpoint, TrainConfig, Trainer};
pub use unfold::{StepSizes, StepTrace, UnfoldModel, UnfoldTrace};
