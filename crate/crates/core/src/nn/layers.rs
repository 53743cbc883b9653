use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::ops;
use super::params::{Init, ParamPath};
use crate::error::Result;

/// Standardization epsilon shared by instance norm and SPADE.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Instance,
    None,
}

impl NormKind {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        match self {
            NormKind::Instance => ops::instance_standardize(x, NORM_EPS),
            NormKind::None => Ok(x.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Relu => Ok(x.relu()?),
            Activation::LeakyRelu(slope) => ops::leaky_relu(x, slope),
            Activation::Sigmoid => ops::sigmoid(x),
            Activation::Identity => Ok(x.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        p: &ParamPath,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        let weight = p.var(
            "weight",
            &[out_channels, in_channels, kernel, kernel],
            Init::Uniform(bound),
        )?;
        let bias = p.var("bias", &[out_channels], Init::Uniform(bound))?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    /// "Same" 3x3 convolution.
    pub fn same3(p: &ParamPath, in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::new(p, in_channels, out_channels, 3, 1, 1)
    }

    pub fn pointwise(p: &ParamPath, in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::new(p, in_channels, out_channels, 1, 1, 0)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv2d(x, &self.weight, self.stride, self.pad)?;
        let b = self.bias.reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
}

impl ConvTranspose2d {
    pub fn new(
        p: &ParamPath,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((out_channels * kernel * kernel) as f64).sqrt();
        let weight = p.var(
            "weight",
            &[in_channels, out_channels, kernel, kernel],
            Init::Uniform(bound),
        )?;
        let bias = p.var("bias", &[out_channels], Init::Uniform(bound))?;
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv_transpose2d(x, &self.weight, self.stride, self.pad)?;
        let c = self.weight.dims()[1];
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Convolution, optional normalization, activation.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv: Conv2d,
    norm: NormKind,
    act: Activation,
}

impl ConvBlock {
    pub fn new(conv: Conv2d, norm: NormKind, act: Activation) -> Self {
        Self { conv, norm, act }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        let y = self.norm.apply(&y)?;
        self.act.apply(&y)
    }
}
