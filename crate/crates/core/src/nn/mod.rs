//! Learnable components: feature extractor, gradient estimators, fusion networks.

pub mod encoder;
pub mod estimator;
pub mod fusion;
mod gather;
mod gemm;
mod ops;
pub mod layers;
pub mod model;
pub mod params;
pub mod stcn;

pub use encoder::{EncoderConfig, FeatureExtractor, FeatureMap};
pub use estimator::GradientEstimator;
pub use fusion::{fuse_average, fuse_with_mask, FuseNet, Fuser, FusionMode};
pub use model::{Model, ModelConfig, Network, ParamBreakdown, MAX_STEPS};
pub use params::{Builder, Init, VarStore};
pub use stcn::{Calculator, Stcn, StcnConfig};
