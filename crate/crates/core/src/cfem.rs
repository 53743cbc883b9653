//! HSV color-feature embedding generator.
//!
//! A DCGAN-style encoder/decoder over the HSV encoding of the replicated NIR
//! input. It predicts an HSV image and taps its decoder at full, quarter and
//! eighth resolution to produce the color guidance pyramid for the geometry
//! network.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{ops, Activation, Conv2d, ConvBlock, ConvTranspose2d, NormKind, ParamPath};

/// Color guidance at three scales, each `N x k x (H/s) x (W/s)`.
#[derive(Debug, Clone)]
pub struct ColorFeaturePyramid {
    pub full: Tensor,
    pub quarter: Tensor,
    pub eighth: Tensor,
}

impl ColorFeaturePyramid {
    /// Checks the level sizes against an `H x W` input.
    pub fn check_scales(&self, height: usize, width: usize) -> Result<()> {
        for (what, t, s) in [
            ("full", &self.full, 1),
            ("quarter", &self.quarter, 4),
            ("eighth", &self.eighth, 8),
        ] {
            let (_, _, h, w) = t.dims4()?;
            if (h, w) != (height / s, width / s) {
                return Err(Error::ShapeMismatch {
                    what: format!("color pyramid level `{what}`"),
                    expected: vec![height / s, width / s],
                    found: vec![h, w],
                });
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> Result<usize> {
        Ok(self.full.dims4()?.1)
    }

    pub fn zeros_like(&self) -> Result<Self> {
        Ok(Self {
            full: self.full.zeros_like()?,
            quarter: self.quarter.zeros_like()?,
            eighth: self.eighth.zeros_like()?,
        })
    }

    /// All-zero guidance for an `N x ? x H x W` input.
    pub fn zeros(reference: &Tensor, channels: usize) -> Result<Self> {
        let (n, _, h, w) = reference.dims4()?;
        let z = |s: usize| Tensor::zeros((n, channels, h / s, w / s), reference.dtype(), reference.device());
        Ok(Self {
            full: z(1)?,
            quarter: z(4)?,
            eighth: z(8)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CfemOutput {
    pub y_hsv: Tensor,
    pub pyramid: ColorFeaturePyramid,
}

pub(crate) fn check_divisible(what: &'static str, x: &Tensor, factor: usize) -> Result<()> {
    let (_, _, h, w) = x.dims4()?;
    if h % factor != 0 || w % factor != 0 || h == 0 || w == 0 {
        return Err(Error::Indivisible {
            what,
            height: h,
            width: w,
            factor,
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct UpBlock {
    conv: ConvTranspose2d,
    norm: NormKind,
}

impl UpBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.apply(&self.conv.forward(x)?)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct CfemGenerator {
    stem: ConvBlock,
    down: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    up: Vec<UpBlock>,
    head: Conv2d,
    tap_eighth: Conv2d,
    tap_quarter: Conv2d,
    tap_full: Conv2d,
}

impl CfemGenerator {
    /// `width` is the stem width; encoder widths double per stage up to
    /// `8 * width` at the eighth-resolution bottleneck. Taps project to
    /// `feature_channels`.
    pub fn new(p: &ParamPath, width: usize, feature_channels: usize, norm: NormKind) -> Result<Self> {
        let lrelu = Activation::LeakyRelu(0.2);
        let stem = ConvBlock::new(Conv2d::same3(&p.sub("stem"), 3, width)?, NormKind::None, lrelu);
        let widths = [width, 2 * width, 4 * width, 8 * width];
        let down = (0..3)
            .map(|i| {
                let conv = Conv2d::new(&p.sub(format!("down{i}")), widths[i], widths[i + 1], 4, 2, 1)?;
                Ok(ConvBlock::new(conv, norm, lrelu))
            })
            .collect::<Result<Vec<_>>>()?;
        let bottleneck = ConvBlock::new(
            Conv2d::same3(&p.sub("bottleneck"), widths[3], widths[3])?,
            norm,
            Activation::Relu,
        );
        // H/8 -> H/4 -> H/2 -> H
        let up = (0..3)
            .map(|i| {
                let conv = ConvTranspose2d::new(&p.sub(format!("up{i}")), widths[3 - i], widths[2 - i], 4, 2, 1)?;
                Ok(UpBlock { conv, norm })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stem,
            down,
            bottleneck,
            up,
            head: Conv2d::same3(&p.sub("head"), width, 3)?,
            tap_eighth: Conv2d::pointwise(&p.sub("tap_eighth"), widths[3], feature_channels)?,
            tap_quarter: Conv2d::pointwise(&p.sub("tap_quarter"), widths[2], feature_channels)?,
            tap_full: Conv2d::pointwise(&p.sub("tap_full"), width, feature_channels)?,
        })
    }

    /// `x`: HSV encoding of the replicated NIR input, `N x 3 x H x W` with
    /// `H` and `W` divisible by 8.
    pub fn forward(&self, x: &Tensor) -> Result<CfemOutput> {
        let (_, c, _, _) = x.dims4()?;
        if c != 3 {
            return Err(Error::Channels {
                what: "CFEM input",
                expected: 3,
                found: c,
            });
        }
        check_divisible("CFEM input", x, 8)?;
        let mut h = self.stem.forward(x)?;
        for block in &self.down {
            h = block.forward(&h)?;
        }
        let d8 = self.bottleneck.forward(&h)?;
        let d4 = self.up[0].forward(&d8)?;
        let d2 = self.up[1].forward(&d4)?;
        let d1 = self.up[2].forward(&d2)?;
        let y_hsv = ops::sigmoid(&self.head.forward(&d1)?)?;
        Ok(CfemOutput {
            y_hsv,
            pyramid: ColorFeaturePyramid {
                full: self.tap_full.forward(&d1)?,
                quarter: self.tap_quarter.forward(&d4)?,
                eighth: self.tap_eighth.forward(&d8)?,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn build(width: usize, k: usize) -> (ParamStore, CfemGenerator) {
        let store = ParamStore::new(5, DType::F32, Device::Cpu);
        let g = CfemGenerator::new(&store.root().sub("cfem"), width, k, NormKind::Instance).unwrap();
        (store, g)
    }

    #[test]
    fn pyramid_scales() {
        let (_, g) = build(4, 6);
        for side in [64, 128] {
            let x = Tensor::rand(0f32, 1.0, (1, 3, side, side), &Device::Cpu).unwrap();
            let out = g.forward(&x).unwrap();
            assert_eq!(out.y_hsv.dims(), &[1, 3, side, side]);
            assert_eq!(out.pyramid.full.dims(), &[1, 6, side, side]);
            assert_eq!(out.pyramid.quarter.dims(), &[1, 6, side / 4, side / 4]);
            assert_eq!(out.pyramid.eighth.dims(), &[1, 6, side / 8, side / 8]);
            out.pyramid.check_scales(side, side).unwrap();
        }
        // Non-square, divisible by 8 but not by 16.
        let x = Tensor::rand(0f32, 1.0, (1, 3, 24, 40), &Device::Cpu).unwrap();
        g.forward(&x).unwrap().pyramid.check_scales(24, 40).unwrap();
    }

    #[test]
    fn rejects_bad_inputs() {
        let (_, g) = build(4, 4);
        let x = Tensor::zeros((1, 3, 60, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(g.forward(&x), Err(Error::Indivisible { .. })));
        let x = Tensor::zeros((1, 1, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(g.forward(&x), Err(Error::Channels { .. })));
    }

    #[test]
    fn deterministic() {
        let x = Tensor::rand(0f32, 1.0, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let (_, a) = build(4, 4);
        let (_, b) = build(4, 4);
        let ya = a.forward(&x).unwrap().y_hsv.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let yb = b.forward(&x).unwrap().y_hsv.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let yc = a.forward(&x).unwrap().y_hsv.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(ya, yb);
        assert_eq!(ya, yc);
    }
}
