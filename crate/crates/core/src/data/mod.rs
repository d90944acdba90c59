//! Mixture synthesis, manifests, batching and the toy corpus.

pub mod batch;
pub mod manifest;
pub mod mixture;
pub mod toy;

pub use batch::{Batch, Batches};
pub use manifest::{Dataset, Example, MixtureSpec, DEFAULT_SEGMENT_SECONDS};
pub use mixture::{measure_snr, synthesize_mixture, Mixture};
pub use toy::{toy_corpus_generate, ToyConfig};
