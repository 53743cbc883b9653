//! Adversarial, pair-consistency, cycle-consistency and edge objectives and
//! their weighted total.
//!
//! Every distance is a mean absolute difference, so the weights do not
//! depend on image size. The discriminators ascend the log-likelihood form of
//! the adversarial loss; the generators descend its non-saturating
//! counterpart `-log D(fake)`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::blocks::PatchLogits;
use crate::error::{Error, Result};
use crate::nn::ops::{self, mean_l1};
use crate::texture;

/// Clamp applied to probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_pair: f64,
    pub lambda_edge: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cyc: 10.0,
            lambda_pair: 10.0,
            lambda_edge: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_pair", self.lambda_pair),
            ("lambda_edge", self.lambda_edge),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Unweighted loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub gan: f64,
    pub pair: f64,
    pub cyc: f64,
    pub edge: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gan: f64,
    pub pair: f64,
    pub cyc: f64,
    pub edge: f64,
    pub total: f64,
}

/// `gan + λ_cyc·cyc + λ_pair·pair + λ_edge·edge`.
pub fn total_loss(parts: LossParts, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [
        ("gan", parts.gan),
        ("pair", parts.pair),
        ("cyc", parts.cyc),
        ("edge", parts.edge),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: format!("loss component `{name}` ({v})"),
            });
        }
    }
    let total = parts.gan
        + w.lambda_cyc * parts.cyc
        + w.lambda_pair * parts.pair
        + w.lambda_edge * parts.edge;
    Ok(LossBreakdown {
        gan: parts.gan,
        pair: parts.pair,
        cyc: parts.cyc,
        edge: parts.edge,
        total,
    })
}

/// Differentiable counterpart of [`total_loss`]. Absent terms are skipped.
pub fn weighted_total(
    gan: &Tensor,
    pair: Option<&Tensor>,
    cyc: Option<&Tensor>,
    edge: Option<&Tensor>,
    w: &LossWeights,
) -> Result<Tensor> {
    let mut total = gan.clone();
    for (term, weight) in [(cyc, w.lambda_cyc), (pair, w.lambda_pair), (edge, w.lambda_edge)] {
        if let Some(t) = term {
            total = (total + (t * weight)?)?;
        }
    }
    Ok(total)
}

fn ensure_finite(what: &str, t: &Tensor) -> Result<()> {
    let s = ops::scalar(&t.sum_all()?)?;
    if !s.is_finite() {
        return Err(Error::NonFinite {
            what: what.to_string(),
        });
    }
    Ok(())
}

fn clamped_log(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(LOG_EPS, 1.0 - LOG_EPS)?.log()?)
}

/// `mean log D(real) + mean log(1 - D(fake))`.
pub fn gan_loss(d_real: &PatchLogits, d_fake: &PatchLogits) -> Result<Tensor> {
    ensure_finite("discriminator output on real images", d_real.probs())?;
    ensure_finite("discriminator output on generated images", d_fake.probs())?;
    let real = clamped_log(d_real.probs())?.mean_all()?;
    let fake = clamped_log(&(1.0 - d_fake.probs())?)?.mean_all()?;
    Ok((real + fake)?)
}

/// Quantity the discriminator minimizes: `-gan_loss`.
pub fn discriminator_loss(d_real: &PatchLogits, d_fake: &PatchLogits) -> Result<Tensor> {
    Ok(gan_loss(d_real, d_fake)?.neg()?)
}

/// Non-saturating generator objective `-mean log D(fake)`.
pub fn generator_gan_loss(d_fake: &PatchLogits) -> Result<Tensor> {
    ensure_finite("discriminator output on generated images", d_fake.probs())?;
    Ok(clamped_log(d_fake.probs())?.mean_all()?.neg()?)
}

/// `|C_A(A) - B| + |G_B(B) - A|`.
pub fn pair_loss(pred_rgb: &Tensor, gt_rgb: &Tensor, pred_nir: &Tensor, gt_nir: &Tensor) -> Result<Tensor> {
    Ok((mean_l1(pred_rgb, gt_rgb)? + mean_l1(pred_nir, gt_nir)?)?)
}

/// `|G_B(C_A(A)) - A| + |C_A(G_B(B)) - B|`.
pub fn cycle_loss(recon_nir: &Tensor, orig_nir: &Tensor, recon_rgb: &Tensor, orig_rgb: &Tensor) -> Result<Tensor> {
    Ok((mean_l1(recon_nir, orig_nir)? + mean_l1(recon_rgb, orig_rgb)?)?)
}

/// `|E(C_A(A)) - E(B)| + |E(G_B(B)) - E(A)|` with the Laplacian as `E`.
pub fn edge_loss(pred_rgb: &Tensor, gt_rgb: &Tensor, pred_nir: &Tensor, gt_nir: &Tensor) -> Result<Tensor> {
    let rgb = mean_l1(&texture::laplacian(pred_rgb)?, &texture::laplacian(gt_rgb)?)?;
    let nir = mean_l1(&texture::laplacian(pred_nir)?, &texture::laplacian(gt_nir)?)?;
    Ok((rgb + nir)?)
}

/// Supervision for the CFEM head: `|y_hsv - x_hsv|`.
pub fn hsv_loss(y_hsv: &Tensor, target_hsv: &Tensor) -> Result<Tensor> {
    mean_l1(y_hsv, target_hsv)
}
