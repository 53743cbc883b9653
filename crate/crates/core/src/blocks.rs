//! Shared building blocks: SPADE modulation, the branch-fusion refiner and
//! the patch discriminators.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::layers::NORM_EPS;
use crate::nn::{ops, Activation, Conv2d, ConvBlock, NormKind, ParamPath};

const LEAK: f64 = 0.2;

/// Spatially-adaptive modulation of a feature map by a guidance map:
/// `norm(x) * (1 + gamma(g)) + beta(g)`.
#[derive(Debug, Clone)]
pub struct Spade {
    shared: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
    feature_channels: usize,
}

impl Spade {
    pub fn new(
        p: &ParamPath,
        feature_channels: usize,
        guidance_channels: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            shared: Conv2d::same3(&p.sub("shared"), guidance_channels, hidden)?,
            gamma: Conv2d::same3(&p.sub("gamma"), hidden, feature_channels)?,
            beta: Conv2d::same3(&p.sub("beta"), hidden, feature_channels)?,
            feature_channels,
        })
    }

    /// The `(gamma, beta)` maps for a guidance tensor already at the
    /// feature resolution.
    pub fn modulation(&self, guidance: &Tensor) -> Result<(Tensor, Tensor)> {
        let hidden = self.shared.forward(guidance)?.relu()?;
        Ok((self.gamma.forward(&hidden)?, self.beta.forward(&hidden)?))
    }

    pub fn forward(&self, features: &Tensor, guidance: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = features.dims4()?;
        if c != self.feature_channels {
            return Err(Error::Channels {
                what: "SPADE features",
                expected: self.feature_channels,
                found: c,
            });
        }
        let guidance = ops::resize_bilinear(guidance, h, w)?;
        let (gamma, beta) = self.modulation(&guidance)?;
        if gamma.dims() != [n, c, h, w] || beta.dims() != [n, c, h, w] {
            return Err(Error::ShapeMismatch {
                what: "SPADE modulation maps".into(),
                expected: vec![n, c, h, w],
                found: gamma.dims().to_vec(),
            });
        }
        let normalized = ops::instance_standardize(features, NORM_EPS)?;
        Ok(((normalized * (gamma + 1.0)?)? + beta)?)
    }
}

/// Combines the coarse color image, the predicted HSV image and the texture
/// map into the final RGB output.
#[derive(Debug, Clone)]
pub struct FusionModule {
    spade_in: Spade,
    conv_in: Conv2d,
    spade_mid: Spade,
    conv_mid: Conv2d,
    head: Conv2d,
}

impl FusionModule {
    pub fn new(p: &ParamPath, width: usize, spade_hidden: usize) -> Result<Self> {
        Ok(Self {
            spade_in: Spade::new(&p.sub("spade_in"), 4, 3, spade_hidden)?,
            conv_in: Conv2d::same3(&p.sub("conv_in"), 4, width)?,
            spade_mid: Spade::new(&p.sub("spade_mid"), width, 3, spade_hidden)?,
            conv_mid: Conv2d::same3(&p.sub("conv_mid"), width, width)?,
            head: Conv2d::pointwise(&p.sub("head"), width, 3)?,
        })
    }

    pub fn forward(&self, y_prime_rgb: &Tensor, y_hsv: &Tensor, y_tex: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = y_prime_rgb.dims4()?;
        for (what, t) in [("y_hsv", y_hsv), ("y_tex", y_tex)] {
            let (_, _, th, tw) = t.dims4()?;
            if (th, tw) != (h, w) {
                return Err(Error::ShapeMismatch {
                    what: format!("fusion input {what}"),
                    expected: vec![h, w],
                    found: vec![th, tw],
                });
            }
        }
        let x = Tensor::cat(&[y_prime_rgb, y_tex], 1)?;
        let x = ops::leaky_relu(&self.spade_in.forward(&x, y_hsv)?, LEAK)?;
        let x = self.conv_in.forward(&x)?;
        let x = ops::leaky_relu(&self.spade_mid.forward(&x, y_hsv)?, LEAK)?;
        let x = ops::leaky_relu(&self.conv_mid.forward(&x)?, LEAK)?;
        ops::sigmoid(&self.head.forward(&x)?)
    }
}

/// Per-patch real/fake probabilities, `N x 1 x h x w`.
#[derive(Debug, Clone)]
pub struct PatchLogits(pub Tensor);

impl PatchLogits {
    pub fn probs(&self) -> &Tensor {
        &self.0
    }

    pub fn grid(&self) -> Result<(usize, usize)> {
        let (_, _, h, w) = self.0.dims4()?;
        Ok((h, w))
    }
}

/// 70x70-receptive-field patch discriminator: three stride-2 and one
/// stride-1 4x4 convolutions followed by a 1-channel 4x4 head.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    layers: Vec<ConvBlock>,
    head: Conv2d,
    in_channels: usize,
}

impl PatchDiscriminator {
    pub fn new(p: &ParamPath, in_channels: usize, width: usize, norm: NormKind) -> Result<Self> {
        let widths = [width, width * 2, width * 4, width * 8];
        let strides = [2, 2, 2, 1];
        let mut layers = Vec::with_capacity(4);
        let mut prev = in_channels;
        for (i, (&out, &stride)) in widths.iter().zip(&strides).enumerate() {
            let conv = Conv2d::new(&p.sub(format!("conv{i}")), prev, out, 4, stride, 1)?;
            let layer_norm = if i == 0 { NormKind::None } else { norm };
            layers.push(ConvBlock::new(conv, layer_norm, Activation::LeakyRelu(LEAK)));
            prev = out;
        }
        let head = Conv2d::new(&p.sub("head"), prev, 1, 4, 1, 1)?;
        Ok(Self {
            layers,
            head,
            in_channels,
        })
    }

    pub fn forward(&self, img: &Tensor) -> Result<PatchLogits> {
        let (_, c, _, _) = img.dims4()?;
        if c != self.in_channels {
            return Err(Error::Channels {
                what: "discriminator input",
                expected: self.in_channels,
                found: c,
            });
        }
        let mut x = img.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(PatchLogits(ops::sigmoid(&self.head.forward(&x)?)?))
    }
}

/// Spatial size of the discriminator's output grid for an input side length.
pub fn patch_grid_side(side: usize) -> usize {
    // Three stride-2 layers (k4 p1): s -> s/2; then two stride-1 (k4 p1): s -> s-1.
    let mut s = side;
    for _ in 0..3 {
        s = (s + 2 - 4) / 2 + 1;
    }
    s - 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn random(store: &ParamStore, dims: (usize, usize, usize, usize), seed: u64) -> Tensor {
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data: Vec<f64> = (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        Tensor::from_vec(data, dims, store.device())
            .unwrap()
            .to_dtype(store.dtype())
            .unwrap()
    }

    fn zero_heads(store: &ParamStore, prefix: &str) {
        for (name, var) in store.vars() {
            if name.starts_with(&format!("{prefix}.gamma")) || name.starts_with(&format!("{prefix}.beta")) {
                var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
            }
        }
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        ops::scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap()
    }

    #[test]
    fn zero_heads_give_plain_standardization() {
        let store = ParamStore::new(3, DType::F64, Device::Cpu);
        let spade = Spade::new(&store.root().sub("s"), 5, 4, 8).unwrap();
        zero_heads(&store, "s");
        let x = random(&store, (2, 5, 8, 8), 1);
        let g = random(&store, (2, 4, 4, 4), 2);
        let out = spade.forward(&x, &g).unwrap();
        let want = ops::instance_standardize(&x, NORM_EPS).unwrap();
        assert_eq!(max_abs_diff(&out, &want), 0.0);
    }

    #[test]
    fn standardization_ignores_channel_offsets() {
        let store = ParamStore::new(3, DType::F64, Device::Cpu);
        let x = random(&store, (1, 3, 6, 6), 5);
        let offsets = Tensor::new(&[0.5f64, -2.0, 7.0], store.device())
            .unwrap()
            .reshape((1, 3, 1, 1))
            .unwrap();
        let shifted = x.broadcast_add(&offsets).unwrap();
        let a = ops::instance_standardize(&x, NORM_EPS).unwrap();
        let b = ops::instance_standardize(&shifted, NORM_EPS).unwrap();
        assert!(max_abs_diff(&a, &b) < 1e-6);
    }

    #[test]
    fn zero_gamma_mean_tracks_beta_mean() {
        let store = ParamStore::new(9, DType::F64, Device::Cpu);
        let spade = Spade::new(&store.root().sub("s"), 3, 2, 6).unwrap();
        for (name, var) in store.vars() {
            if name.starts_with("s.gamma") {
                var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
            }
        }
        let x = random(&store, (1, 3, 8, 8), 11);
        let g = random(&store, (1, 2, 8, 8), 12);
        let out = spade.forward(&x, &g).unwrap();
        let (_, beta) = spade.modulation(&g).unwrap();
        let mean_out = out.mean((2, 3)).unwrap();
        let mean_beta = beta.mean((2, 3)).unwrap();
        assert!(max_abs_diff(&mean_out, &mean_beta) < 1e-5);
    }

    #[test]
    fn spade_rejects_channel_mismatch() {
        let store = ParamStore::new(0, DType::F32, Device::Cpu);
        let spade = Spade::new(&store.root().sub("s"), 4, 3, 4).unwrap();
        let x = random(&store, (1, 5, 8, 8), 1);
        let g = random(&store, (1, 3, 8, 8), 1);
        assert!(matches!(spade.forward(&x, &g), Err(Error::Channels { .. })));
    }

    #[test]
    fn fusion_shape_and_range() {
        let store = ParamStore::new(1, DType::F32, Device::Cpu);
        let fusion = FusionModule::new(&store.root().sub("fusion"), 8, 8).unwrap();
        let y = fusion
            .forward(
                &random(&store, (2, 3, 16, 16), 1),
                &random(&store, (2, 3, 16, 16), 2),
                &(random(&store, (2, 1, 16, 16), 3) - 0.5).unwrap(),
            )
            .unwrap();
        assert_eq!(y.dims(), &[2, 3, 16, 16]);
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(fusion
            .forward(
                &random(&store, (1, 3, 16, 16), 1),
                &random(&store, (1, 3, 8, 8), 2),
                &random(&store, (1, 1, 16, 16), 3),
            )
            .is_err());
    }

    #[test]
    fn discriminator_grid() {
        assert_eq!(patch_grid_side(256), 30);
        assert_eq!(patch_grid_side(64), 6);
        let store = ParamStore::new(1, DType::F32, Device::Cpu);
        let d = PatchDiscriminator::new(&store.root().sub("da"), 3, 4, NormKind::Instance).unwrap();
        let out = d.forward(&random(&store, (1, 3, 64, 64), 4)).unwrap();
        assert_eq!(out.grid().unwrap(), (6, 6));
        let v = out.probs().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|p| *p > 0.0 && *p < 1.0));
        assert!(matches!(
            d.forward(&random(&store, (1, 1, 64, 64), 4)),
            Err(Error::Channels { .. })
        ));
    }
}
