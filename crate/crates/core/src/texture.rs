//! Laplacian high-frequency extraction: the texture branch input and the
//! fixed edge extractors used by the edge loss.

use candle_core::Tensor;

use crate::colorspace::ImagePlane;
use crate::error::{Error, Result};
use crate::nn::ops;

/// 4-neighbor Laplacian, row-major.
pub const LAPLACIAN_4: [[f32; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];

/// 8-neighbor variant, kept for experimentation.
pub const LAPLACIAN_8: [[f32; 3]; 3] = [[1.0, 1.0, 1.0], [1.0, -8.0, 1.0], [1.0, 1.0, 1.0]];

/// Kernel used by the texture branch and the edge loss.
pub const TEXTURE_KERNEL: [[f32; 3]; 3] = LAPLACIAN_4;

/// Signed per-channel filter response, channel-major like [`ImagePlane`].
#[derive(Debug, Clone, PartialEq)]
pub struct TextureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl TextureMap {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

fn check_min_size(what: &'static str, height: usize, width: usize) -> Result<()> {
    if height < 3 || width < 3 {
        return Err(Error::TooSmall {
            what,
            height,
            width,
            min: 3,
        });
    }
    Ok(())
}

/// Per-channel 3x3 Laplacian with replicate padding. The output is not
/// clipped.
pub fn laplacian_map(img: &ImagePlane) -> Result<TextureMap> {
    let (c, h, w) = img.dims();
    check_min_size("laplacian_map", h, w)?;
    let mut data = vec![0.0f32; c * h * w];
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for ch in 0..c {
        let src = img.channel(ch);
        let dst = &mut data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for (ky, row) in TEXTURE_KERNEL.iter().enumerate() {
                    let sy = clamp(y as isize + ky as isize - 1, h);
                    for (kx, &k) in row.iter().enumerate() {
                        if k == 0.0 {
                            continue;
                        }
                        let sx = clamp(x as isize + kx as isize - 1, w);
                        acc += k * src[sy * w + sx];
                    }
                }
                dst[y * w + x] = acc;
            }
        }
    }
    Ok(TextureMap {
        channels: c,
        height: h,
        width: w,
        data,
    })
}

/// Edge-feature extractor for the edge loss (three-channel for color images,
/// one-channel for NIR). It is the texture Laplacian itself.
pub fn edge_map(img: &ImagePlane) -> Result<TextureMap> {
    laplacian_map(img)
}

/// Differentiable batched Laplacian over `N x C x H x W`.
pub fn laplacian(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    check_min_size("laplacian", h, w)?;
    let kernel: Vec<f32> = TEXTURE_KERNEL.iter().flatten().copied().collect();
    let kernel = Tensor::from_vec(kernel, (1, 1, 3, 3), x.device())?.to_dtype(x.dtype())?;
    let planes = x
        .reshape((n * c, 1, h, w))?
        .pad_with_same(2, 1, 1)?
        .pad_with_same(3, 1, 1)?;
    Ok(ops::conv2d(&planes, &kernel, 1, 0)?.reshape((n, c, h, w))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspace::ColorSpace;
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    fn nir(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> ImagePlane {
        ImagePlane::from_fn(ColorSpace::Nir, h, w, |_, y, x| f(y, x)).unwrap()
    }

    #[test]
    fn constant_image_has_zero_response() {
        let img = ImagePlane::filled(ColorSpace::Rgb, 6, 7, 0.7).unwrap();
        let t = laplacian_map(&img).unwrap();
        assert_eq!(t.dims(), (3, 6, 7));
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_interior_is_zero() {
        // x / 8 is exact in binary floating point.
        let t = laplacian_map(&nir(5, 9, |_, x| x as f32 / 8.0)).unwrap();
        for y in 0..5 {
            for x in 1..8 {
                assert_eq!(t.get(0, y, x), 0.0);
            }
        }
        // Replicate padding: left border sees f(-1) = f(0).
        assert_eq!(t.get(0, 2, 0), 1.0 / 8.0);
        assert_eq!(t.get(0, 2, 8), -1.0 / 8.0);
    }

    #[test]
    fn impulse_imprints_kernel() {
        let t = laplacian_map(&nir(5, 5, |y, x| if (y, x) == (2, 2) { 1.0 } else { 0.0 })).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let want = match (y, x) {
                    (2, 2) => -4.0,
                    (1, 2) | (3, 2) | (2, 1) | (2, 3) => 1.0,
                    _ => 0.0,
                };
                assert_eq!(t.get(0, y, x), want, "({y},{x})");
            }
        }
    }

    #[test]
    fn step_edge_touches_only_adjacent_columns() {
        let t = edge_map(&nir(4, 8, |_, x| if x >= 4 { 1.0 } else { 0.0 })).unwrap();
        for y in 0..4 {
            for x in 0..8 {
                let want = match x {
                    3 => 1.0,
                    4 => -1.0,
                    _ => 0.0,
                };
                assert_eq!(t.get(0, y, x), want);
            }
        }
    }

    #[test]
    fn identical_channels_give_identical_responses() {
        let img = ImagePlane::from_fn(ColorSpace::Rgb, 5, 6, |_, y, x| ((y * 7 + x * 3) % 10) as f32 / 10.0)
            .unwrap();
        let t = edge_map(&img).unwrap();
        assert_eq!(t.channel(0), t.channel(1));
        assert_eq!(t.channel(1), t.channel(2));
        assert_eq!(t, laplacian_map(&img).unwrap());
    }

    #[test]
    fn rejects_tiny_images() {
        assert!(matches!(
            laplacian_map(&nir(2, 5, |_, _| 0.0)),
            Err(Error::TooSmall { .. })
        ));
    }

    #[test]
    fn tensor_path_matches_plane_path() {
        let img = ImagePlane::from_fn(ColorSpace::Rgb, 6, 5, |c, y, x| ((c + y * 5 + x * 3) % 11) as f32 / 10.0)
            .unwrap();
        let t = img.to_tensor(DType::F64, &Device::Cpu).unwrap();
        let got = laplacian(&t).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let want = laplacian_map(&img).unwrap();
        for (g, w) in got.iter().zip(want.data()) {
            assert!((*g as f32 - w).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn linear_in_input(
            a in -2f32..2.0,
            b in -2f32..2.0,
            seed in 0usize..1000,
        ) {
            let x = nir(6, 6, |y, x| ((y * 13 + x * 7 + seed) % 17) as f32 / 16.0);
            let z = nir(6, 6, |y, x| ((y * 5 + x * 11 + seed) % 19) as f32 / 18.0);
            let lx = laplacian_map(&x).unwrap();
            let lz = laplacian_map(&z).unwrap();
            // Evaluate L(a x + b z) through the linear-combination kernel sum.
            let combo: Vec<f32> = x.data().iter().zip(z.data()).map(|(p, q)| a * p + b * q).collect();
            let (lo, hi) = combo.iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            // Shift/scale into [0,1] so it is a valid plane, then undo.
            let span = (hi - lo).max(1e-3);
            let plane = nir(6, 6, |y, x| (combo[y * 6 + x] - lo) / span);
            let lc = laplacian_map(&plane).unwrap();
            for i in 0..36 {
                let want = a * lx.data()[i] + b * lz.data()[i];
                prop_assert!((lc.data()[i] * span - want).abs() < 1e-4);
            }
        }

        #[test]
        fn translation_equivariant_in_interior(seed in 0usize..1000) {
            let f = |y: usize, x: usize| ((y * 31 + x * 17 + seed) % 23) as f32 / 22.0;
            let a = laplacian_map(&nir(8, 8, f)).unwrap();
            let b = laplacian_map(&nir(8, 8, |y, x| f(y, x + 1))).unwrap();
            for y in 1..7 {
                for x in 1..6 {
                    prop_assert_eq!(a.get(0, y, x + 1), b.get(0, y, x));
                }
            }
        }
    }
}
