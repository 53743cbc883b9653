//! The full network set: colorization network (texture branch + CFEM + GRM +
//! fusion), reverse generator and the two patch discriminators.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::blocks::{FusionModule, PatchDiscriminator, PatchLogits};
use crate::cfem::{CfemGenerator, ColorFeaturePyramid};
use crate::colorspace::replicated_nir_hsv;
use crate::error::{Error, Result};
use crate::grm::{DecoderTaps, UNet, UNetConfig};
use crate::nn::{NormKind, ParamStore};
use crate::texture;

pub const GROUP_CFEM: &str = "cfem";
pub const GROUP_GRM: &str = "grm";
pub const GROUP_FUSION: &str = "fusion";
pub const GROUP_GB: &str = "gb";
pub const GROUP_DA: &str = "da";
pub const GROUP_DB: &str = "db";

/// Architecture widths and the three ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub grm_width: usize,
    pub gb_width: usize,
    pub cfem_width: usize,
    /// Channel count `k` of every color-pyramid level.
    pub feature_channels: usize,
    pub fusion_width: usize,
    pub spade_hidden: usize,
    pub disc_width: usize,
    pub norm: NormKind,
    pub use_texture: bool,
    pub use_multiscale: bool,
    pub use_hsv_cfem: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grm_width: 64,
            gb_width: 64,
            cfem_width: 64,
            feature_channels: 64,
            fusion_width: 64,
            spade_hidden: 128,
            disc_width: 64,
            norm: NormKind::Instance,
            use_texture: true,
            use_multiscale: true,
            use_hsv_cfem: true,
        }
    }
}

impl ModelConfig {
    /// Narrow widths for CPU-sized experiments.
    pub fn desk() -> Self {
        Self {
            grm_width: 8,
            gb_width: 8,
            cfem_width: 8,
            feature_channels: 8,
            fusion_width: 8,
            spade_hidden: 8,
            disc_width: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("grm_width", self.grm_width),
            ("gb_width", self.gb_width),
            ("cfem_width", self.cfem_width),
            ("feature_channels", self.feature_channels),
            ("fusion_width", self.fusion_width),
            ("spade_hidden", self.spade_hidden),
            ("disc_width", self.disc_width),
        ];
        for (name, w) in widths {
            if w == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Everything the colorization network produces for one batch.
#[derive(Debug, Clone)]
pub struct ColorizationOutput {
    pub y_rgb: Tensor,
    pub y_prime_rgb: Tensor,
    /// Zeros when the CFEM branch is disabled.
    pub y_hsv: Tensor,
    /// Zeros when the texture branch is disabled.
    pub y_tex: Tensor,
    pub pyramid: Option<ColorFeaturePyramid>,
    pub taps: DecoderTaps,
}

pub struct Mcfnet {
    store: ParamStore,
    config: ModelConfig,
    cfem: Option<CfemGenerator>,
    grm: UNet,
    fusion: FusionModule,
    gb: UNet,
    da: PatchDiscriminator,
    db: PatchDiscriminator,
}

impl Mcfnet {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, dtype, device.clone());
        let root = store.root();
        let cfem = if config.use_hsv_cfem {
            Some(CfemGenerator::new(
                &root.sub(GROUP_CFEM),
                config.cfem_width,
                config.feature_channels,
                config.norm,
            )?)
        } else {
            None
        };
        let grm = UNet::new(
            &root.sub(GROUP_GRM),
            UNetConfig {
                in_channels: 1,
                out_channels: 3,
                width: config.grm_width,
                norm: config.norm,
                multiscale: config.use_multiscale,
                guidance: Some((config.feature_channels, config.spade_hidden)),
            },
        )?;
        let fusion = FusionModule::new(&root.sub(GROUP_FUSION), config.fusion_width, config.spade_hidden)?;
        let gb = UNet::new(
            &root.sub(GROUP_GB),
            UNetConfig {
                in_channels: 3,
                out_channels: 1,
                width: config.gb_width,
                norm: config.norm,
                multiscale: false,
                guidance: None,
            },
        )?;
        let da = PatchDiscriminator::new(&root.sub(GROUP_DA), 3, config.disc_width, config.norm)?;
        let db = PatchDiscriminator::new(&root.sub(GROUP_DB), 1, config.disc_width, config.norm)?;
        Ok(Self {
            store,
            config: config.clone(),
            cfem,
            grm,
            fusion,
            gb,
            da,
            db,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Parameter groups updated by the generator step.
    pub fn generator_groups(&self) -> Vec<&'static str> {
        let mut groups = Vec::with_capacity(4);
        if self.cfem.is_some() {
            groups.push(GROUP_CFEM);
        }
        groups.extend([GROUP_GRM, GROUP_FUSION, GROUP_GB]);
        groups
    }

    pub fn discriminator_groups(&self) -> Vec<&'static str> {
        vec![GROUP_DA, GROUP_DB]
    }

    /// NIR -> RGB through all three branches.
    pub fn colorize(&self, x_nir: &Tensor) -> Result<ColorizationOutput> {
        let (_, c, _, _) = x_nir.dims4()?;
        if c != 1 {
            return Err(Error::Channels {
                what: "colorization input",
                expected: 1,
                found: c,
            });
        }
        let y_tex = if self.config.use_texture {
            texture::laplacian(x_nir)?
        } else {
            x_nir.zeros_like()?
        };
        let (y_hsv, pyramid) = match &self.cfem {
            Some(cfem) => {
                let out = cfem.forward(&replicated_nir_hsv(x_nir)?)?;
                (out.y_hsv, Some(out.pyramid))
            }
            None => {
                let z = x_nir.zeros_like()?;
                (Tensor::cat(&[&z, &z, &z], 1)?, None)
            }
        };
        let (y_prime_rgb, taps) = match &pyramid {
            Some(p) => self.grm.forward(x_nir, Some(p))?,
            None => {
                let zeros = ColorFeaturePyramid::zeros(x_nir, self.config.feature_channels)?;
                self.grm.forward(x_nir, Some(&zeros))?
            }
        };
        let y_rgb = self.fusion.forward(&y_prime_rgb, &y_hsv, &y_tex)?;
        Ok(ColorizationOutput {
            y_rgb,
            y_prime_rgb,
            y_hsv,
            y_tex,
            pyramid,
            taps,
        })
    }

    /// RGB -> NIR.
    pub fn reverse(&self, x_rgb: &Tensor) -> Result<Tensor> {
        Ok(self.gb.forward(x_rgb, None)?.0)
    }

    /// Judges RGB images (real ground truth vs. colorized output).
    pub fn discriminate_rgb(&self, x: &Tensor) -> Result<PatchLogits> {
        self.da.forward(x)
    }

    /// Judges NIR images (real input vs. reverse-generated).
    pub fn discriminate_nir(&self, x: &Tensor) -> Result<PatchLogits> {
        self.db.forward(x)
    }

    pub fn cfem(&self) -> Option<&CfemGenerator> {
        self.cfem.as_ref()
    }

    pub fn grm(&self) -> &UNet {
        &self.grm
    }

    pub fn fusion(&self) -> &FusionModule {
        &self.fusion
    }
}
