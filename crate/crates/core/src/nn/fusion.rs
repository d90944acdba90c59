//! Final-stage fusion of the speech and noise estimates.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{sigmoid, CausalUpConv2d, ChannelNorm, GatedConv2d, GatedUpConv2d, PRelu};
use super::params::Builder;
use super::stcn::{Stcn, StcnConfig};
use crate::error::{Error, Result};
use crate::frontend::ComplexSpectrogram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum FusionMode {
    /// Learned complex residual added to the speech estimate.
    #[default]
    R,
    /// Learned per-bin weighting of the two speech hypotheses.
    G,
    /// Plain average of the two speech hypotheses.
    A,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::R, FusionMode::G, FusionMode::A];

    fn head_channels(self) -> Option<usize> {
        match self {
            FusionMode::R => Some(2),
            FusionMode::G => Some(1),
            FusionMode::A => None,
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FusionMode::R => "R",
            FusionMode::G => "G",
            FusionMode::A => "A",
        };
        f.write_str(s)
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "R" | "r" => Ok(FusionMode::R),
            "G" | "g" => Ok(FusionMode::G),
            "A" | "a" => Ok(FusionMode::A),
            other => Err(Error::InvalidArgument(format!("unknown fusion mode {other:?} (expected R, G or A)"))),
        }
    }
}

/// `0.5·s̃ + 0.5·(x − ñ)`.
pub fn fuse_average(
    x: &ComplexSpectrogram,
    s_tilde: &ComplexSpectrogram,
    n_tilde: &ComplexSpectrogram,
) -> Result<ComplexSpectrogram> {
    s_tilde.ensure_same_shape(x, "fuse")?;
    n_tilde.ensure_same_shape(x, "fuse")?;
    s_tilde.add(&x.sub(n_tilde)?)?.scale(0.5)
}

/// `M ⊙ s̃ + (1 − M) ⊙ (x − ñ)` for a `[B, K, L]` mask.
pub fn fuse_with_mask(
    x: &ComplexSpectrogram,
    s_tilde: &ComplexSpectrogram,
    n_tilde: &ComplexSpectrogram,
    mask: &Tensor,
) -> Result<ComplexSpectrogram> {
    s_tilde.ensure_same_shape(x, "fuse")?;
    n_tilde.ensure_same_shape(x, "fuse")?;
    let (b, _, k, l) = x.dims();
    if mask.dims() != [b, k, l] {
        return Err(Error::shape("fuse", format!("mask [{b}, {k}, {l}]"), format!("{:?}", mask.dims())));
    }
    let m = mask.unsqueeze(1)?;
    let other = x.sub(n_tilde)?;
    let out = s_tilde
        .tensor()
        .broadcast_mul(&m)?
        .add(&other.tensor().broadcast_mul(&m.affine(-1.0, 1.0)?)?)?;
    ComplexSpectrogram::new(out)
}

#[derive(Debug, Clone)]
struct DownUnit {
    conv: GatedConv2d,
    norm: ChannelNorm,
    act: PRelu,
}

#[derive(Debug, Clone)]
enum UpPost {
    Activated(ChannelNorm, PRelu),
    Head(CausalUpConv2d),
}

#[derive(Debug, Clone)]
struct UpUnit {
    conv: Option<GatedUpConv2d>,
    post: UpPost,
}

/// Encoder, S-TCN bottleneck and mirrored decoder over the RI planes of `(x, s̃, ñ)`.
#[derive(Debug, Clone)]
pub struct FuseNet {
    down: Vec<DownUnit>,
    bottleneck: Stcn,
    up: Vec<UpUnit>,
    channels: usize,
    bins: usize,
}

const FUSE_DEPTH: usize = 5;

impl FuseNet {
    pub fn new(
        vb: &Builder,
        channels: usize,
        time_kernel: usize,
        bins: usize,
        out_channels: usize,
        cfg: &StcnConfig,
    ) -> Result<Self> {
        let mut down = Vec::with_capacity(FUSE_DEPTH);
        for i in 0..FUSE_DEPTH {
            let vb = vb.pp(format!("down{i}"));
            let input = if i == 0 { 6 } else { channels };
            down.push(DownUnit {
                conv: GatedConv2d::new(&vb.pp("glu"), input, channels, time_kernel, 2)?,
                norm: ChannelNorm::new(&vb.pp("norm"), channels)?,
                act: PRelu::new(&vb.pp("act"), channels)?,
            });
        }
        let coarse = (0..FUSE_DEPTH).fold(bins, |k, _| k.div_ceil(2));
        let bottleneck = Stcn::new(&vb.pp("stcn"), coarse * channels, cfg)?;
        let mut up = Vec::with_capacity(FUSE_DEPTH);
        for i in 0..FUSE_DEPTH {
            let vb = vb.pp(format!("up{i}"));
            up.push(if i == 0 {
                UpUnit {
                    conv: None,
                    post: UpPost::Head(CausalUpConv2d::new(&vb.pp("head"), 2 * channels, out_channels, time_kernel)?),
                }
            } else {
                UpUnit {
                    conv: Some(GatedUpConv2d::new(&vb.pp("glu"), 2 * channels, channels, time_kernel)?),
                    post: UpPost::Activated(
                        ChannelNorm::new(&vb.pp("norm"), channels)?,
                        PRelu::new(&vb.pp("act"), channels)?,
                    ),
                }
            });
        }
        Ok(Self {
            down,
            bottleneck,
            up,
            channels,
            bins,
        })
    }

    /// Raw network output, `[B, out_channels, K, L]`.
    pub fn forward(
        &self,
        x: &ComplexSpectrogram,
        s_tilde: &ComplexSpectrogram,
        n_tilde: &ComplexSpectrogram,
    ) -> Result<Tensor> {
        s_tilde.ensure_same_shape(x, "fuse")?;
        n_tilde.ensure_same_shape(x, "fuse")?;
        if x.bins() != self.bins {
            return Err(Error::shape("fuse", format!("{} bins", self.bins), format!("{} bins", x.bins())));
        }
        let input = Tensor::cat(&[x.tensor(), s_tilde.tensor(), n_tilde.tensor()], 1)?
            .permute((0, 3, 2, 1))?
            .contiguous()?;
        let mut skips = Vec::with_capacity(FUSE_DEPTH);
        let mut sizes = vec![self.bins];
        let mut h = input;
        for d in &self.down {
            h = d.act.forward(&d.norm.forward(&d.conv.forward(&h)?)?)?;
            sizes.push(h.dim(2)?);
            skips.push(h.clone());
        }
        let (b, l, k, c) = h.dims4()?;
        h = self
            .bottleneck
            .forward(&h.reshape((b, l, k * c))?)?
            .reshape((b, l, k, self.channels))?;
        for i in (0..FUSE_DEPTH).rev() {
            let joined = Tensor::cat(&[&h, &skips[i]], 3)?;
            let out_bins = sizes[i];
            let unit = &self.up[i];
            h = match (&unit.conv, &unit.post) {
                (Some(conv), UpPost::Activated(norm, act)) => act.forward(&norm.forward(&conv.forward(&joined, out_bins)?)?)?,
                (None, UpPost::Head(head)) => head.forward(&joined, out_bins)?,
                _ => unreachable!("constructed consistently"),
            };
        }
        // [B, L, K, C] -> [B, C, K, L]
        Ok(h.permute((0, 3, 2, 1))?.contiguous()?)
    }
}

/// A fusion mode together with the network it needs.
#[derive(Debug, Clone)]
pub struct Fuser {
    mode: FusionMode,
    net: Option<FuseNet>,
}

impl Fuser {
    pub fn new(vb: &Builder, mode: FusionMode, channels: usize, time_kernel: usize, bins: usize, cfg: &StcnConfig) -> Result<Self> {
        let net = match mode.head_channels() {
            Some(out) => Some(FuseNet::new(vb, channels, time_kernel, bins, out, cfg)?),
            None => None,
        };
        Ok(Self { mode, net })
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn net(&self) -> Option<&FuseNet> {
        self.net.as_ref()
    }

    pub fn fuse(
        &self,
        x: &ComplexSpectrogram,
        s_tilde: &ComplexSpectrogram,
        n_tilde: &ComplexSpectrogram,
    ) -> Result<ComplexSpectrogram> {
        match (self.mode, &self.net) {
            (FusionMode::A, _) => fuse_average(x, s_tilde, n_tilde),
            (FusionMode::R, Some(net)) => {
                let residual = net.forward(x, s_tilde, n_tilde)?;
                ComplexSpectrogram::new(s_tilde.tensor().add(&residual)?)
            }
            (FusionMode::G, Some(net)) => {
                let mask = sigmoid(&net.forward(x, s_tilde, n_tilde)?.squeeze(1)?)?;
                fuse_with_mask(x, s_tilde, n_tilde, &mask)
            }
            (mode, None) => Err(Error::InvalidArgument(format!("fusion mode {mode} has no network"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::VarStore;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_spec(rng: &mut ChaCha8Rng, k: usize, l: usize) -> ComplexSpectrogram {
        let v: Vec<f32> = (0..2 * k * l).map(|_| rng.random_range(-1.0..1.0)).collect();
        ComplexSpectrogram::new(Tensor::from_vec(v, (1, 2, k, l), &Device::Cpu).unwrap()).unwrap()
    }

    fn flat(s: &ComplexSpectrogram) -> Vec<f32> {
        s.tensor().flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn mode_parses_and_prints() {
        for m in FusionMode::ALL {
            assert_eq!(m.to_string().parse::<FusionMode>().unwrap(), m);
        }
        assert!("X".parse::<FusionMode>().is_err());
    }

    #[test]
    fn average_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_spec(&mut rng, 5, 4);
        let s = rand_spec(&mut rng, 5, 4);
        let n = x.sub(&s).unwrap();
        let out = fuse_average(&x, &s, &n).unwrap();
        for (a, b) in flat(&out).iter().zip(flat(&s)) {
            assert!((a - b).abs() < 1e-6);
        }
        let z = ComplexSpectrogram::zeros(1, 5, 4, DType::F32).unwrap();
        let half = fuse_average(&x, &z, &z).unwrap();
        for (a, b) in flat(&half).iter().zip(flat(&x)) {
            assert_eq!(*a, b * 0.5);
        }
    }

    #[test]
    fn constant_masks_select_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_spec(&mut rng, 5, 4);
        let s = rand_spec(&mut rng, 5, 4);
        let n = rand_spec(&mut rng, 5, 4);
        let ones = Tensor::ones((1, 5, 4), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(flat(&fuse_with_mask(&x, &s, &n, &ones).unwrap()), flat(&s));
        let zeros = ones.zeros_like().unwrap();
        assert_eq!(flat(&fuse_with_mask(&x, &s, &n, &zeros).unwrap()), flat(&x.sub(&n).unwrap()));
    }

    #[test]
    fn fusenet_shapes_and_causality() {
        let store = VarStore::new(0, DType::F32);
        let net = FuseNet::new(&store.root(), 8, 2, 161, 2, &StcnConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_spec(&mut rng, 161, 12);
        let s = rand_spec(&mut rng, 161, 12);
        let n = rand_spec(&mut rng, 161, 12);
        let y = net.forward(&x, &s, &n).unwrap();
        assert_eq!(y.dims(), [1, 2, 161, 12]);

        let mut v = flat(&x);
        for k in 0..161 {
            v[k * 12 + 8] += 1.0;
        }
        let x2 = ComplexSpectrogram::new(Tensor::from_vec(v, (1, 2, 161, 12), &Device::Cpu).unwrap()).unwrap();
        let y2 = net.forward(&x2, &s, &n).unwrap();
        let past = |t: &Tensor| -> Vec<f32> { t.narrow(3, 0, 8).unwrap().flatten_all().unwrap().to_vec1().unwrap() };
        assert_eq!(past(&y), past(&y2));
        assert_ne!(flat(&ComplexSpectrogram::new(y).unwrap()), flat(&ComplexSpectrogram::new(y2).unwrap()));
    }

    #[test]
    fn residual_mode_adds_network_output() {
        let store = VarStore::new(4, DType::F32);
        let fuser = Fuser::new(&store.root(), FusionMode::R, 4, 2, 161, &StcnConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_spec(&mut rng, 161, 3);
        let s = rand_spec(&mut rng, 161, 3);
        let n = rand_spec(&mut rng, 161, 3);
        let out = fuser.fuse(&x, &s, &n).unwrap();
        let res = fuser.net().unwrap().forward(&x, &s, &n).unwrap();
        let expected = ComplexSpectrogram::new(s.tensor().add(&res).unwrap()).unwrap();
        assert_eq!(flat(&out), flat(&expected));
    }
}
