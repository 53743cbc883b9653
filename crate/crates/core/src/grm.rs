//! U-Net generators: the geometry reconstruction network (NIR -> coarse RGB,
//! with multi-scale long skips and SPADE color guidance) and the plain
//! reverse generator (RGB -> NIR).

use candle_core::Tensor;

use crate::blocks::Spade;
use crate::cfem::{check_divisible, ColorFeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{ops, Activation, Conv2d, ConvBlock, NormKind, ParamPath};

/// Decoder feature maps; `y_k` lives at `(H, W) / 2^(k-1)`.
#[derive(Debug, Clone)]
pub struct DecoderTaps {
    pub y1: Tensor,
    pub y2: Tensor,
    pub y3: Tensor,
    pub y4: Tensor,
}

impl DecoderTaps {
    pub fn spatial_sizes(&self) -> Result<[(usize, usize); 4]> {
        let hw = |t: &Tensor| -> Result<(usize, usize)> {
            let (_, _, h, w) = t.dims4()?;
            Ok((h, w))
        };
        Ok([hw(&self.y1)?, hw(&self.y2)?, hw(&self.y3)?, hw(&self.y4)?])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub norm: NormKind,
    /// Long skips y4 -> y2, y4 -> y1 and y3 -> y1.
    pub multiscale: bool,
    /// `(guidance channels, SPADE hidden width)` when color guidance is
    /// injected at the y4, y3 and y1 scales.
    pub guidance: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
struct GuidanceSites {
    eighth: Spade,
    quarter: Spade,
    full: Spade,
}

#[derive(Debug, Clone)]
pub struct UNet {
    enc: [ConvBlock; 4],
    dec4: ConvBlock,
    dec3: ConvBlock,
    dec2: ConvBlock,
    dec1: ConvBlock,
    spade: Option<GuidanceSites>,
    head: Conv2d,
    cfg: UNetConfig,
}

impl UNet {
    pub fn new(p: &ParamPath, cfg: UNetConfig) -> Result<Self> {
        let c = cfg.width;
        let lrelu = Activation::LeakyRelu(0.2);
        let enc = [
            ConvBlock::new(Conv2d::same3(&p.sub("enc1"), cfg.in_channels, c)?, NormKind::None, lrelu),
            ConvBlock::new(Conv2d::new(&p.sub("enc2"), c, 2 * c, 4, 2, 1)?, cfg.norm, lrelu),
            ConvBlock::new(Conv2d::new(&p.sub("enc3"), 2 * c, 4 * c, 4, 2, 1)?, cfg.norm, lrelu),
            ConvBlock::new(Conv2d::new(&p.sub("enc4"), 4 * c, 8 * c, 4, 2, 1)?, cfg.norm, lrelu),
        ];
        let long2 = if cfg.multiscale { 8 * c } else { 0 };
        let long1 = if cfg.multiscale { 8 * c + 4 * c } else { 0 };
        let block = |name: &str, cin: usize, cout: usize| -> Result<ConvBlock> {
            Ok(ConvBlock::new(Conv2d::same3(&p.sub(name), cin, cout)?, cfg.norm, Activation::Relu))
        };
        let dec4 = block("dec4", 8 * c, 8 * c)?;
        let dec3 = block("dec3", 8 * c + 4 * c, 4 * c)?;
        let dec2 = block("dec2", 4 * c + 2 * c + long2, 2 * c)?;
        let dec1 = block("dec1", 2 * c + c + long1, c)?;
        let spade = match cfg.guidance {
            Some((k, hidden)) => Some(GuidanceSites {
                eighth: Spade::new(&p.sub("spade4"), 8 * c, k, hidden)?,
                quarter: Spade::new(&p.sub("spade3"), 8 * c, k, hidden)?,
                full: Spade::new(&p.sub("spade1"), 2 * c, k, hidden)?,
            }),
            None => None,
        };
        Ok(Self {
            enc,
            dec4,
            dec3,
            dec2,
            dec1,
            spade,
            head: Conv2d::pointwise(&p.sub("head"), c, cfg.out_channels)?,
            cfg,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Runs the network. `pyramid` is required exactly when the network was
    /// built with guidance.
    pub fn forward(
        &self,
        x: &Tensor,
        pyramid: Option<&ColorFeaturePyramid>,
    ) -> Result<(Tensor, DecoderTaps)> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Channels {
                what: "U-Net input",
                expected: self.cfg.in_channels,
                found: c,
            });
        }
        check_divisible("U-Net input", x, 8)?;
        let guidance = match (&self.spade, pyramid) {
            (Some(sites), Some(p)) => {
                p.check_scales(h, w)?;
                Some((sites, p))
            }
            (Some(_), None) => {
                return Err(Error::Config(
                    "guided U-Net called without a color pyramid".into(),
                ))
            }
            (None, _) => None,
        };

        let e1 = self.enc[0].forward(x)?;
        let e2 = self.enc[1].forward(&e1)?;
        let e3 = self.enc[2].forward(&e2)?;
        let e4 = self.enc[3].forward(&e3)?;

        let m4 = match guidance {
            Some((s, p)) => s.eighth.forward(&e4, &p.eighth)?,
            None => e4,
        };
        let y4 = self.dec4.forward(&m4)?;

        let mut m3 = ops::upsample_bilinear(&y4, 2)?;
        if let Some((s, p)) = guidance {
            m3 = s.quarter.forward(&m3, &p.quarter)?;
        }
        let y3 = self.dec3.forward(&Tensor::cat(&[&m3, &e3], 1)?)?;

        let m2 = ops::upsample_bilinear(&y3, 2)?;
        let y2 = if self.cfg.multiscale {
            let y4_up4 = ops::upsample_bilinear(&y4, 4)?;
            self.dec2.forward(&Tensor::cat(&[&m2, &e2, &y4_up4], 1)?)?
        } else {
            self.dec2.forward(&Tensor::cat(&[&m2, &e2], 1)?)?
        };

        let mut m1 = ops::upsample_bilinear(&y2, 2)?;
        if let Some((s, p)) = guidance {
            m1 = s.full.forward(&m1, &p.full)?;
        }
        let y1 = if self.cfg.multiscale {
            let y3_up4 = ops::upsample_bilinear(&y3, 4)?;
            let y4_up8 = ops::upsample_bilinear(&y4, 8)?;
            self.dec1.forward(&Tensor::cat(&[&m1, &e1, &y3_up4, &y4_up8], 1)?)?
        } else {
            self.dec1.forward(&Tensor::cat(&[&m1, &e1], 1)?)?
        };

        let out = ops::sigmoid(&self.head.forward(&y1)?)?;
        Ok((out, DecoderTaps { y1, y2, y3, y4 }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn cfg(multiscale: bool, guidance: Option<(usize, usize)>) -> UNetConfig {
        UNetConfig {
            in_channels: 1,
            out_channels: 3,
            width: 4,
            norm: NormKind::Instance,
            multiscale,
            guidance,
        }
    }

    #[test]
    fn taps_follow_scale_arithmetic() {
        let store = ParamStore::new(0, DType::F32, Device::Cpu);
        let net = UNet::new(&store.root().sub("grm"), cfg(true, Some((5, 4)))).unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 1, 64, 64), &Device::Cpu).unwrap();
        let pyr = ColorFeaturePyramid::zeros(&x, 5).unwrap();
        let (y, taps) = net.forward(&x, Some(&pyr)).unwrap();
        assert_eq!(y.dims(), &[2, 3, 64, 64]);
        assert_eq!(taps.spatial_sizes().unwrap(), [(64, 64), (32, 32), (16, 16), (8, 8)]);
    }

    #[test]
    fn dropping_long_skips_shrinks_the_network() {
        let with = ParamStore::new(0, DType::F32, Device::Cpu);
        UNet::new(&with.root().sub("grm"), cfg(true, None)).unwrap();
        let without = ParamStore::new(0, DType::F32, Device::Cpu);
        UNet::new(&without.root().sub("grm"), cfg(false, None)).unwrap();
        assert!(without.group_size("grm") < with.group_size("grm"));
    }

    #[test]
    fn rejects_mismatched_pyramid() {
        let store = ParamStore::new(0, DType::F32, Device::Cpu);
        let net = UNet::new(&store.root().sub("grm"), cfg(true, Some((5, 4)))).unwrap();
        let x = Tensor::rand(0f32, 1.0, (1, 1, 32, 32), &Device::Cpu).unwrap();
        let big = Tensor::zeros((1, 1, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let pyr = ColorFeaturePyramid::zeros(&big, 5).unwrap();
        assert!(matches!(net.forward(&x, Some(&pyr)), Err(Error::ShapeMismatch { .. })));
        assert!(net.forward(&x, None).is_err());
        let rgb = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.forward(&rgb, None), Err(Error::Channels { .. })));
    }
}
