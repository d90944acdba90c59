use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::encoder::{EncoderConfig, FeatureExtractor, FeatureMap};
use super::estimator::GradientEstimator;
use super::fusion::{Fuser, FusionMode};
use super::params::{Builder, Init, VarStore};
use super::stcn::StcnConfig;
use crate::error::{Error, Result};
use crate::frontend::ComplexSpectrogram;
use crate::signal::{GradientSet, ParameterSet};
use crate::unfold::{self, StepSizes, UnfoldModel, UnfoldTrace, ETA_INIT};

pub const MAX_STEPS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub bins: usize,
    pub encoder: EncoderConfig,
    pub stcn: StcnConfig,
    /// Channel width of every calculator trunk.
    pub estimator_width: usize,
    pub fuse_channels: usize,
    pub fuse_time_kernel: usize,
    /// Number of unfolding steps `Q`.
    pub q: usize,
    pub fusion: FusionMode,
    pub eta_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            bins: 161,
            encoder: EncoderConfig::default(),
            stcn: StcnConfig::default(),
            estimator_width: 214,
            fuse_channels: 32,
            fuse_time_kernel: 2,
            q: 3,
            fusion: FusionMode::R,
            eta_init: ETA_INIT,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.stcn.validate()?;
        if self.bins != 161 {
            return Err(Error::Config(format!("the network expects 161 frequency bins, got {}", self.bins)));
        }
        if self.q > MAX_STEPS {
            return Err(Error::Config(format!("q = {} exceeds the maximum of {MAX_STEPS}", self.q)));
        }
        if self.estimator_width == 0 || self.fuse_channels == 0 || self.fuse_time_kernel == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if !self.eta_init.is_finite() {
            return Err(Error::Config("eta_init must be finite".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.output_bins(self.bins) * self.encoder.channels
    }
}

/// The full unfolded enhancer.
#[derive(Debug, Clone)]
pub struct Model {
    encoder: FeatureExtractor,
    initializer: GradientEstimator,
    steps: Vec<GradientEstimator>,
    fuser: Fuser,
    eta: StepSizes,
    q: usize,
}

impl Model {
    pub fn new(vb: &Builder, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let feature_dim = cfg.feature_dim();
        let estimator = |vb: Builder| GradientEstimator::new(&vb, feature_dim, cfg.estimator_width, cfg.bins, &cfg.stcn);
        Ok(Self {
            encoder: FeatureExtractor::new(&vb.pp("encoder"), &cfg.encoder, cfg.bins)?,
            initializer: estimator(vb.pp("initializer"))?,
            steps: (0..cfg.q)
                .map(|i| estimator(vb.pp("steps").pp(i)))
                .collect::<Result<Vec<_>>>()?,
            fuser: Fuser::new(&vb.pp("fusion"), cfg.fusion, cfg.fuse_channels, cfg.fuse_time_kernel, cfg.bins, &cfg.stcn)?,
            eta: StepSizes::new(vb.pp("eta").get("values", &[4], Init::Const(cfg.eta_init))?)?,
            q: cfg.q,
        })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn fuser(&self) -> &Fuser {
        &self.fuser
    }

    pub fn encoder(&self) -> &FeatureExtractor {
        &self.encoder
    }

    pub fn initializer(&self) -> &GradientEstimator {
        &self.initializer
    }

    pub fn step_estimator(&self, step: usize) -> Result<&GradientEstimator> {
        self.steps.get(step).ok_or_else(|| {
            Error::InvalidArgument(format!("no estimator for step {step} (model has {})", self.steps.len()))
        })
    }

    /// Runs all `Q` steps.
    pub fn forward(&self, x: &ComplexSpectrogram) -> Result<UnfoldTrace> {
        unfold::unfold_forward(x, self, self.q)
    }
}

impl UnfoldModel for Model {
    type Features = FeatureMap;

    fn encode(&self, x: &ComplexSpectrogram) -> Result<FeatureMap> {
        self.encoder.forward(x)
    }

    fn initialize(&self, features: &FeatureMap, x: &ComplexSpectrogram) -> Result<ParameterSet> {
        self.initializer.initialize(features, x)
    }

    fn prior_gradients(
        &self,
        step: usize,
        features: &FeatureMap,
        s_hat: &ComplexSpectrogram,
        n_hat: &ComplexSpectrogram,
    ) -> Result<GradientSet> {
        self.step_estimator(step)?.estimate(features, s_hat, n_hat)
    }

    fn step_sizes(&self) -> &StepSizes {
        &self.eta
    }

    fn num_steps(&self) -> usize {
        self.steps.len()
    }

    fn fuse(
        &self,
        x: &ComplexSpectrogram,
        s_tilde: &ComplexSpectrogram,
        n_tilde: &ComplexSpectrogram,
    ) -> Result<ComplexSpectrogram> {
        self.fuser.fuse(x, s_tilde, n_tilde)
    }
}

/// Parameter totals per component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub encoder: usize,
    pub initializer: usize,
    pub steps: Vec<usize>,
    pub fusion: usize,
    pub eta: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.encoder + self.initializer + self.steps.iter().sum::<usize>() + self.fusion + self.eta
    }
}

/// Weights plus two views of them: one tracked for training, one detached for
/// inference. Both read the same storage.
pub struct Network {
    config: ModelConfig,
    store: VarStore,
    train: Model,
    eval: Model,
}

impl Network {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let store = VarStore::new(seed, DType::F32);
        let train = Model::new(&store.root(), &config)?;
        let eval = Model::new(&store.frozen(), &config)?;
        Ok(Self {
            config,
            store,
            train,
            eval,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &VarStore {
        &self.store
    }

    pub fn model(&self) -> &Model {
        &self.train
    }

    pub fn eval_model(&self) -> &Model {
        &self.eval
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params("")
    }

    pub fn breakdown(&self) -> ParamBreakdown {
        ParamBreakdown {
            encoder: self.store.num_params("encoder."),
            initializer: self.store.num_params("initializer."),
            steps: (0..self.config.q)
                .map(|i| self.store.num_params(&format!("steps.{i}.")))
                .collect(),
            fusion: self.store.num_params("fusion."),
            eta: self.store.num_params("eta."),
        }
    }

    pub fn eta(&self) -> Result<[f64; 4]> {
        self.eval.eta.values()
    }

    /// Inference pass on detached weights.
    pub fn enhance_spectrum(&self, x: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
        Ok(self.eval.forward(&x.to_dtype(DType::F32)?)?.fused)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_budget() {
        let counts: Vec<usize> = (0..=2)
            .map(|q| Network::new(ModelConfig { q, ..Default::default() }, 0).unwrap().num_params())
            .collect();
        let d1 = counts[1] - counts[0];
        let d2 = counts[2] - counts[1];
        assert_eq!(d1, d2);
        let net = Network::new(ModelConfig { q: 2, ..Default::default() }, 0).unwrap();
        let b = net.breakdown();
        assert_eq!(b.total(), net.num_params());
        assert_eq!(b.steps, vec![d1, d1]);
        assert_eq!(b.initializer, d1);
        assert_eq!(b.eta, 4);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { q: MAX_STEPS + 1, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { bins: 257, ..Default::default() }.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn eval_model_tracks_weight_updates() {
        let net = Network::new(ModelConfig { q: 0, fusion: FusionMode::A, ..Default::default() }, 0).unwrap();
        let var = net.store().get("eta.values").unwrap();
        var.set(&candle_core::Tensor::new(&[0.5f32, 0.25, 0.125, 1.0], &candle_core::Device::Cpu).unwrap())
            .unwrap();
        assert_eq!(net.eta().unwrap(), [0.5, 0.25, 0.125, 1.0]);
    }
}
