//! Minimal convolutional building blocks over candle tensors.

pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;

pub use layers::{Activation, Conv2d, ConvBlock, ConvTranspose2d, NormKind};
pub use params::{group_of, Init, ParamPath, ParamStore};
pub use optim::{Adam, AdamConfig, AdamState};
