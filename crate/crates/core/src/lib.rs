//! NIR-to-RGB colorization with three cooperating branches: a Laplacian
//! texture branch, an HSV color-feature generator whose multi-scale features
//! guide a U-Net geometry generator through SPADE, and a fusion head. The
//! colorizer is trained against a reverse RGB-to-NIR generator and two patch
//! discriminators in a two-stage paired/unpaired schedule.

pub mod blocks;
pub mod cfem;
pub mod checkpoint;
pub mod colorspace;
pub mod data;
pub mod error;
pub mod grm;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod texture;
pub mod trainer;

pub use colorspace::{ColorSpace, ImagePlane};
pub use error::{Error, Result};
pub use model::{Mcfnet, ModelConfig};
