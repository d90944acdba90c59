//! Feature extractor: a cascade of recalibration encoding layers, each a gated
//! frequency-downsampling convolution followed by a residual UNet-block.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{CausalConv2d, CausalUpConv2d, ChannelNorm, GatedConv2d, PRelu};
use super::params::Builder;
use crate::error::{Error, Result};
use crate::frontend::ComplexSpectrogram;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// (time, frequency) kernel of the downsampling convolutions.
    pub conv_kernel: [usize; 2],
    pub conv_stride: [usize; 2],
    pub channels: usize,
    /// One entry per encoding layer; 0 omits that layer's UNet-block.
    pub unet_depths: Vec<usize>,
    pub unet_kernel: [usize; 2],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            conv_kernel: [1, 3],
            conv_stride: [1, 2],
            channels: 64,
            unet_depths: vec![4, 3, 2, 1, 0],
            unet_kernel: [2, 3],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_kernel[1] != 3 || self.unet_kernel[1] != 3 {
            return Err(Error::Config("frequency kernels must be 3".into()));
        }
        if self.conv_stride != [1, 2] {
            return Err(Error::Config("encoder stride must be (1, 2)".into()));
        }
        if self.conv_kernel[0] == 0 || self.unet_kernel[0] == 0 || self.channels == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.unet_depths.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        Ok(())
    }

    /// Bin count after every layer halves the axis (rounding up).
    pub fn output_bins(&self, bins: usize) -> usize {
        self.unet_depths.iter().fold(bins, |k, _| k.div_ceil(2))
    }
}

/// Encoder output, held channels-last as `[B, L, K', C]`.
#[derive(Debug, Clone)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn channels_last(&self) -> &Tensor {
        &self.0
    }

    /// `[B, C, K', L]`.
    pub fn to_channels_first(&self) -> Result<Tensor> {
        Ok(self.0.permute((0, 3, 2, 1))?.contiguous()?)
    }

    /// `[B, L, K'·C]`, one feature vector per frame.
    pub fn per_frame(&self) -> Result<Tensor> {
        let (b, l, k, c) = self.0.dims4()?;
        Ok(self.0.reshape((b, l, k * c))?)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let (b, l, k, c) = self.0.dims4().expect("rank-4 feature map");
        (b, c, k, l)
    }
}

#[derive(Debug, Clone)]
struct ConvUnit {
    conv: CausalConv2d,
    norm: ChannelNorm,
    act: PRelu,
}

impl ConvUnit {
    fn new(vb: &Builder, input: usize, output: usize, time_kernel: usize) -> Result<Self> {
        Ok(Self {
            conv: CausalConv2d::new(&vb.pp("conv"), input, output, time_kernel, 2)?,
            norm: ChannelNorm::new(&vb.pp("norm"), output)?,
            act: PRelu::new(&vb.pp("act"), output)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.act.forward(&self.norm.forward(&self.conv.forward(x)?)?)
    }
}

#[derive(Debug, Clone)]
struct UpUnit {
    conv: CausalUpConv2d,
    post: Option<(ChannelNorm, PRelu)>,
}

impl UpUnit {
    fn new(vb: &Builder, input: usize, output: usize, time_kernel: usize, activate: bool) -> Result<Self> {
        let post = if activate {
            Some((
                ChannelNorm::new(&vb.pp("norm"), output)?,
                PRelu::new(&vb.pp("act"), output)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv: CausalUpConv2d::new(&vb.pp("conv"), input, output, time_kernel)?,
            post,
        })
    }

    fn forward(&self, x: &Tensor, out_bins: usize) -> Result<Tensor> {
        let y = self.conv.forward(x, out_bins)?;
        match &self.post {
            Some((norm, act)) => act.forward(&norm.forward(&y)?),
            None => Ok(y),
        }
    }
}

/// U-shaped multi-scale block: `depth` stride-2 encoders, mirrored decoders with skip
/// concatenation. Output has the input's geometry.
#[derive(Debug, Clone)]
struct UNetBlock {
    down: Vec<ConvUnit>,
    up: Vec<UpUnit>,
}

impl UNetBlock {
    fn new(vb: &Builder, channels: usize, depth: usize, time_kernel: usize) -> Result<Self> {
        let down = (0..depth)
            .map(|i| ConvUnit::new(&vb.pp(format!("down{i}")), channels, channels, time_kernel))
            .collect::<Result<Vec<_>>>()?;
        // up[i] restores the resolution of level i; the deepest one has no skip input.
        let up = (0..depth)
            .map(|i| {
                let input = if i + 1 == depth { channels } else { 2 * channels };
                UpUnit::new(&vb.pp(format!("up{i}")), input, channels, time_kernel, i != 0)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { down, up })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut levels = vec![x.clone()];
        for d in &self.down {
            let next = d.forward(levels.last().expect("non-empty"))?;
            levels.push(next);
        }
        let depth = self.down.len();
        let mut h = levels[depth].clone();
        for i in (0..depth).rev() {
            let input = if i + 1 == depth {
                h
            } else {
                Tensor::cat(&[&h, &levels[i + 1]], 3)?
            };
            h = self.up[i].forward(&input, levels[i].dim(2)?)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
struct EncodingLayer {
    glu: GatedConv2d,
    norm: ChannelNorm,
    act: PRelu,
    unet: Option<UNetBlock>,
}

impl EncodingLayer {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.act.forward(&self.norm.forward(&self.glu.forward(x)?)?)?;
        match &self.unet {
            Some(u) => Ok(h.add(&u.forward(&h)?)?),
            None => Ok(h),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    layers: Vec<EncodingLayer>,
    bins: usize,
}

impl FeatureExtractor {
    pub fn new(vb: &Builder, cfg: &EncoderConfig, bins: usize) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.unet_depths.len());
        for (i, &depth) in cfg.unet_depths.iter().enumerate() {
            let vb = vb.pp(format!("rel{i}"));
            let input = if i == 0 { 2 } else { cfg.channels };
            layers.push(EncodingLayer {
                glu: GatedConv2d::new(&vb.pp("glu"), input, cfg.channels, cfg.conv_kernel[0], 2)?,
                norm: ChannelNorm::new(&vb.pp("norm"), cfg.channels)?,
                act: PRelu::new(&vb.pp("act"), cfg.channels)?,
                unet: if depth == 0 {
                    None
                } else {
                    Some(UNetBlock::new(&vb.pp("unet"), cfg.channels, depth, cfg.unet_kernel[0])?)
                },
            });
        }
        Ok(Self { layers, bins })
    }

    pub fn forward(&self, x: &ComplexSpectrogram) -> Result<FeatureMap> {
        if x.bins() != self.bins {
            return Err(Error::shape(
                "feature_extract",
                format!("{} frequency bins", self.bins),
                format!("{} bins", x.bins()),
            ));
        }
        // [B, 2, K, L] -> [B, L, K, 2]
        let mut h = x.tensor().permute((0, 3, 2, 1))?.contiguous()?;
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(FeatureMap(h))
    }
}
