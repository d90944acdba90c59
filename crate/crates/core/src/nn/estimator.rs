//! Gradient estimator: one shared gain-gradient calculator and one residual-gradient
//! calculator per source. The parameter initializer reuses the same structure.

use candle_core::{Tensor, D};

use super::encoder::FeatureMap;
use super::layers::sigmoid;
use super::stcn::{Calculator, StcnConfig};
use super::params::Builder;
use crate::error::{Error, Result};
use crate::frontend::ComplexSpectrogram;
use crate::signal::{GainMask, GradientSet, ParameterSet, ResidualSpectrum};

const MAG_EPS: f64 = 1e-12;

/// `[B, L, K]` head outputs of the three calculators.
struct Heads {
    gain_s: Tensor,
    gain_n: Tensor,
    res_s: (Tensor, Tensor),
    res_n: (Tensor, Tensor),
}

/// `[B, L, K]` -> `[B, K, L]`.
fn bins_first(t: &Tensor) -> Result<Tensor> {
    Ok(t.transpose(1, 2)?.contiguous()?)
}

fn residual_planes((re, im): &(Tensor, Tensor)) -> Result<Tensor> {
    Ok(Tensor::stack(&[bins_first(re)?, bins_first(im)?], 1)?)
}

#[derive(Debug, Clone)]
pub struct GradientEstimator {
    ggc: Calculator,
    rgc_s: Calculator,
    rgc_n: Calculator,
    bins: usize,
}

impl GradientEstimator {
    pub fn new(vb: &Builder, feature_dim: usize, width: usize, bins: usize, cfg: &StcnConfig) -> Result<Self> {
        let input = feature_dim + 2 * bins;
        Ok(Self {
            ggc: Calculator::new(&vb.pp("ggc"), input, width, bins, cfg)?,
            rgc_s: Calculator::new(&vb.pp("rgc_s"), input, width, bins, cfg)?,
            rgc_n: Calculator::new(&vb.pp("rgc_n"), input, width, bins, cfg)?,
            bins,
        })
    }

    fn heads(&self, f: &FeatureMap, s: &ComplexSpectrogram, n: &ComplexSpectrogram) -> Result<Heads> {
        s.ensure_same_shape(n, "gradient_estimate")?;
        let (fb, _, _, fl) = f.dims();
        if s.bins() != self.bins || s.batch() != fb || s.frames() != fl {
            return Err(Error::shape(
                "gradient_estimate",
                format!("spectra [{fb}, 2, {}, {fl}]", self.bins),
                format!("{:?}", s.tensor().dims()),
            ));
        }
        let feat = f.per_frame()?;
        // [B, K, L] -> [B, L, K]
        let frames_first = |t: Tensor| -> Result<Tensor> { Ok(t.transpose(1, 2)?) };
        let gain_in = Tensor::cat(
            &[
                feat.clone(),
                frames_first(s.magnitude(MAG_EPS)?)?,
                frames_first(n.magnitude(MAG_EPS)?)?,
            ],
            D::Minus1,
        )?
        .contiguous()?;
        let (gain_s, gain_n) = self.ggc.forward(&gain_in)?;
        let residual_in = |x: &ComplexSpectrogram| -> Result<Tensor> {
            Ok(Tensor::cat(&[feat.clone(), frames_first(x.re()?)?, frames_first(x.im()?)?], D::Minus1)?
                .contiguous()?)
        };
        let res_s = self.rgc_s.forward(&residual_in(s)?)?;
        let res_n = self.rgc_n.forward(&residual_in(n)?)?;
        Ok(Heads {
            gain_s,
            gain_n,
            res_s,
            res_n,
        })
    }

    /// Prior-gradient estimate from the features and the current consistent estimates.
    pub fn estimate(&self, f: &FeatureMap, s_hat: &ComplexSpectrogram, n_hat: &ComplexSpectrogram) -> Result<GradientSet> {
        let h = self.heads(f, s_hat, n_hat)?;
        Ok(GradientSet {
            d_g_s: bins_first(&h.gain_s)?,
            d_g_n: bins_first(&h.gain_n)?,
            d_r_s: residual_planes(&h.res_s)?,
            d_r_n: residual_planes(&h.res_n)?,
        })
    }

    /// Initial parameters conditioned on `(f, x, x)`: logistic gains, linear residuals.
    pub fn initialize(&self, f: &FeatureMap, x: &ComplexSpectrogram) -> Result<ParameterSet> {
        let h = self.heads(f, x, x)?;
        ParameterSet::new(
            GainMask::new(sigmoid(&bins_first(&h.gain_s)?)?)?,
            GainMask::new(sigmoid(&bins_first(&h.gain_n)?)?)?,
            ResidualSpectrum::new(residual_planes(&h.res_s)?)?,
            ResidualSpectrum::new(residual_planes(&h.res_n)?)?,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::encoder::{EncoderConfig, FeatureExtractor};
    use crate::nn::params::VarStore;
    use candle_core::{DType, Device};

    fn spec(frames: usize, seed: u64) -> ComplexSpectrogram {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..2 * 161 * frames).map(|_| rng.random_range(-1.0..1.0)).collect();
        ComplexSpectrogram::new(Tensor::from_vec(v, (1, 2, 161, frames), &Device::Cpu).unwrap()).unwrap()
    }

    fn setup(store: &VarStore) -> (FeatureExtractor, GradientEstimator) {
        let vb = store.frozen();
        let enc = FeatureExtractor::new(&vb.pp("enc"), &EncoderConfig::default(), 161).unwrap();
        let est = GradientEstimator::new(&vb.pp("est"), 384, 32, 161, &StcnConfig::default()).unwrap();
        (enc, est)
    }

    #[test]
    fn output_geometry_and_gain_range() {
        let store = VarStore::new(0, DType::F32);
        let (enc, est) = setup(&store);
        let x = spec(50, 1);
        let f = enc.forward(&x).unwrap();
        let g = est.estimate(&f, &x, &spec(50, 2)).unwrap();
        assert_eq!(g.d_g_s.dims(), [1, 161, 50]);
        assert_eq!(g.d_r_n.dims(), [1, 2, 161, 50]);
        let p = est.initialize(&f, &x).unwrap();
        let gains: Vec<f32> = p.g_s.tensor().flatten_all().unwrap().to_vec1().unwrap();
        assert!(gains.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn estimate_is_causal() {
        let store = VarStore::new(1, DType::F32);
        let (enc, est) = setup(&store);
        let x = spec(20, 3);
        let s = spec(20, 4);
        let mut v: Vec<f32> = s.tensor().flatten_all().unwrap().to_vec1().unwrap();
        for k in 0..2 * 161 {
            v[k * 20 + 12] -= 0.7;
        }
        let s2 = ComplexSpectrogram::new(Tensor::from_vec(v, (1, 2, 161, 20), &Device::Cpu).unwrap()).unwrap();
        let f = enc.forward(&x).unwrap();
        let a = est.estimate(&f, &s, &x).unwrap();
        let b = est.estimate(&f, &s2, &x).unwrap();
        let past = |t: &Tensor| -> Vec<f32> { t.narrow(t.rank() - 1, 0, 12).unwrap().flatten_all().unwrap().to_vec1().unwrap() };
        assert_eq!(past(&a.d_g_s), past(&b.d_g_s));
        assert_eq!(past(&a.d_r_s), past(&b.d_r_s));
        assert_ne!(
            a.d_r_s.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.d_r_s.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn mismatched_frames_are_rejected() {
        let store = VarStore::new(0, DType::F32);
        let (enc, est) = setup(&store);
        let f = enc.forward(&spec(10, 1)).unwrap();
        assert!(est.estimate(&f, &spec(9, 2), &spec(9, 3)).is_err());
    }
}
