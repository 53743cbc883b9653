//! Full-reference image quality metrics: PSNR, SSIM and mean angular error,
//! plus directory-level evaluation reports.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorspace::{ColorSpace, ImagePlane};
use crate::data::{list_pngs, load_image};
use crate::error::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same_shape(what: &str, pred: &ImagePlane, gt: &ImagePlane) -> Result<()> {
    if pred.dims() != gt.dims() {
        let (c, h, w) = gt.dims();
        let (pc, ph, pw) = pred.dims();
        return Err(Error::ShapeMismatch {
            what: what.to_string(),
            expected: vec![c, h, w],
            found: vec![pc, ph, pw],
        });
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(pred: &ImagePlane, gt: &ImagePlane) -> Result<f64> {
    check_same_shape("psnr input", pred, gt)?;
    let n = pred.data().len() as f64;
    let mse = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Mean over channels, as `H x W` f64.
pub fn luminance(img: &ImagePlane) -> Vec<f64> {
    let (c, h, w) = img.dims();
    let mut out = vec![0.0; h * w];
    for ch in 0..c {
        for (o, &v) in out.iter_mut().zip(img.channel(ch)) {
            *o += f64::from(v);
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    out
}

/// Separable "valid" filtering of an `h x w` map with `taps` on both axes.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully-contained 11x11 Gaussian windows of the
/// luminance images.
pub fn ssim(pred: &ImagePlane, gt: &ImagePlane) -> Result<f64> {
    check_same_shape("ssim input", pred, gt)?;
    let (_, h, w) = pred.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall {
            what: "ssim input",
            height: h,
            width: w,
            min: SSIM_WINDOW,
        });
    }
    let a = luminance(pred);
    let b = luminance(gt);
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let product = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(&a, h, w, &taps);
    let mu_b = filter_valid(&b, h, w, &taps);
    let e_aa = filter_valid(&product(&a, &a), h, w, &taps);
    let e_bb = filter_valid(&product(&b, &b), h, w, &taps);
    let e_ab = filter_valid(&product(&a, &b), h, w, &taps);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// Mean per-pixel angle in degrees between RGB vectors; pixels where either
/// vector is zero contribute 0.
pub fn angular_error(pred: &ImagePlane, gt: &ImagePlane) -> Result<f64> {
    check_same_shape("angular error input", pred, gt)?;
    if pred.channels() != 3 {
        return Err(Error::Channels {
            what: "angular error input",
            expected: 3,
            found: pred.channels(),
        });
    }
    let (_, h, w) = pred.dims();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let p = pred.pixel3(y, x).map(f64::from);
            let g = gt.pixel3(y, x).map(f64::from);
            if p == [0.0; 3] || g == [0.0; 3] {
                continue;
            }
            // atan2(|p x g|, p . g) stays accurate for nearly parallel vectors.
            let dot: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
            let cross = [
                p[1] * g[2] - p[2] * g[1],
                p[2] * g[0] - p[0] * g[2],
                p[0] * g[1] - p[1] * g[0],
            ];
            let sin = cross.iter().map(|v| v * v).sum::<f64>().sqrt();
            total += sin.atan2(dot).to_degrees();
        }
    }
    Ok(total / (h * w) as f64)
}

/// External perceptual distance (e.g. a learned feature metric).
pub trait PerceptualMetric: Sync {
    fn name(&self) -> &str;
    fn distance(&self, pred: &ImagePlane, gt: &ImagePlane) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub ae: f64,
    pub perceptual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub ae: f64,
    pub perceptual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: AggregateMetrics,
}

impl MetricsReport {
    pub fn from_rows(per_image: Vec<ImageMetrics>) -> Self {
        let n = per_image.len();
        let mean = |f: &dyn Fn(&ImageMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                per_image.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let perceptual = if n > 0 && per_image.iter().all(|r| r.perceptual.is_some()) {
            Some(mean(&|r| r.perceptual.unwrap_or(0.0)))
        } else {
            None
        };
        let aggregate = AggregateMetrics {
            count: n,
            psnr: mean(&|r| r.psnr),
            ssim: mean(&|r| r.ssim),
            ae: mean(&|r| r.ae),
            perceptual,
        };
        Self { per_image, aggregate }
    }

    /// `id,psnr,ssim,ae,perceptual` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut out = String::from("id,psnr,ssim,ae,perceptual\n");
        for r in &self.per_image {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{}\n",
                r.id,
                r.psnr,
                r.ssim,
                r.ae,
                opt(r.perceptual)
            ));
        }
        let a = &self.aggregate;
        out.push_str(&format!(
            "mean,{:.6},{:.6},{:.6},{}\n",
            a.psnr,
            a.ssim,
            a.ae,
            opt(a.perceptual)
        ));
        out
    }

    /// Writes `report.csv` and `report.json` into `out_dir`.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let csv = out_dir.join("report.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = out_dir.join("report.json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }
}

pub fn image_metrics(
    id: &str,
    pred: &ImagePlane,
    gt: &ImagePlane,
    perceptual: Option<&dyn PerceptualMetric>,
) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        id: id.to_string(),
        psnr: psnr(pred, gt)?,
        ssim: ssim(pred, gt)?,
        ae: angular_error(pred, gt)?,
        perceptual: perceptual.map(|m| m.distance(pred, gt)).transpose()?,
    })
}

/// Compares every `<stem>.png` in `pred_dir` with the same stem in `gt_dir`.
/// Any stem present on one side only is an error listing all of them.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path, perceptual: Option<&dyn PerceptualMetric>) -> Result<MetricsReport> {
    let pred = list_pngs(pred_dir)?;
    let gt = list_pngs(gt_dir)?;
    let unmatched: Vec<String> = pred
        .keys()
        .filter(|s| !gt.contains_key(*s))
        .chain(gt.keys().filter(|s| !pred.contains_key(*s)))
        .cloned()
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::UnmatchedStems(unmatched));
    }
    let rows = pred
        .par_iter()
        .map(|(stem, p)| {
            let a = load_image(p, ColorSpace::Rgb)?;
            let b = load_image(&gt[stem], ColorSpace::Rgb)?;
            image_metrics(stem, &a, &b, perceptual)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rgb(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> ImagePlane {
        ImagePlane::from_fn(ColorSpace::Rgb, h, w, f).unwrap()
    }

    fn textured(h: usize, w: usize) -> ImagePlane {
        rgb(h, w, |c, y, x| ((y * 31 + x * 17 + c * 7) % 23) as f32 / 22.0)
    }

    #[test]
    fn psnr_examples() {
        let a = textured(16, 16);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let g = rgb(8, 8, |_, _, _| 0.5);
        let p = rgb(8, 8, |_, _, _| 0.6);
        assert!((psnr(&p, &g).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&p, &rgb(8, 9, |_, _, _| 0.5)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = textured(24, 24);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = rgb(24, 24, |c, y, x| 1.0 - a.get(c, y, x));
        assert!(ssim(&inv, &a).unwrap() < 0.0);
        assert!(matches!(ssim(&textured(10, 24), &textured(10, 24)), Err(Error::TooSmall { .. })));
    }

    #[test]
    fn angular_examples() {
        let a = textured(8, 8);
        assert_eq!(angular_error(&a, &a).unwrap(), 0.0);
        let r = rgb(4, 4, |c, _, _| if c == 0 { 1.0 } else { 0.0 });
        let g = rgb(4, 4, |c, _, _| if c == 1 { 1.0 } else { 0.0 });
        assert!((angular_error(&r, &g).unwrap() - 90.0).abs() < 1e-9);
        let zero = rgb(4, 4, |_, _, _| 0.0);
        assert_eq!(angular_error(&zero, &g).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_taps_sum_to_one() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((t[0] - t[10]).abs() < 1e-15);
        assert!(t[5] > t[4]);
    }

    #[test]
    fn report_aggregate_is_mean() {
        let rows = vec![
            ImageMetrics {
                id: "a".into(),
                psnr: 10.0,
                ssim: 0.5,
                ae: 2.0,
                perceptual: None,
            },
            ImageMetrics {
                id: "b".into(),
                psnr: 30.0,
                ssim: 0.7,
                ae: 4.0,
                perceptual: None,
            },
        ];
        let r = MetricsReport::from_rows(rows);
        assert_eq!(r.aggregate.count, 2);
        assert!((r.aggregate.psnr - 20.0).abs() < 1e-12);
        assert!((r.aggregate.ssim - 0.6).abs() < 1e-12);
        assert!((r.aggregate.ae - 3.0).abs() < 1e-12);
        assert_eq!(r.to_csv().lines().count(), 4);
    }

    fn plane_strategy() -> impl Strategy<Value = ImagePlane> {
        proptest::collection::vec(0.0f32..=1.0, 3 * 12 * 12)
            .prop_map(|d| ImagePlane::new(ColorSpace::Rgb, 12, 12, d).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn psnr_symmetric_and_monotone(a in plane_strategy(), amp in 0.01f32..0.2) {
            let shift = |k: f32| rgb(12, 12, |c, y, x| {
                let v = a.get(c, y, x);
                if v > 0.5 { v - k } else { v + k }
            });
            let small = shift(amp);
            let large = shift(amp * 1.5);
            prop_assert!((psnr(&a, &small).unwrap() - psnr(&small, &a).unwrap()).abs() < 1e-12);
            prop_assert!(psnr(&a, &large).unwrap() < psnr(&a, &small).unwrap());
        }

        #[test]
        fn ssim_self_and_symmetric(a in plane_strategy(), b in plane_strategy()) {
            prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
            let ab = ssim(&a, &b).unwrap();
            prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn ae_ignores_scale(a in plane_strategy(), b in plane_strategy(), k in 0.1f32..1.0) {
            let scaled = rgb(12, 12, |c, y, x| a.get(c, y, x) * k);
            let base = angular_error(&a, &b).unwrap();
            prop_assert!((angular_error(&scaled, &b).unwrap() - base).abs() < 1e-4);
            prop_assert!((0.0..=180.0).contains(&base));
        }
    }
}
