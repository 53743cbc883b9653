//! Image planes and the RGB/HSV/NIR conversions used to build color-branch
//! inputs and targets.
//!
//! All channels, hue included, live on `[0, 1]`. Hue is the fraction of a
//! full turn, so `2/3` is pure blue.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColorSpace {
    Nir,
    Rgb,
    Hsv,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Nir => 1,
            ColorSpace::Rgb | ColorSpace::Hsv => 3,
        }
    }
}

/// A normalized raster stored channel-major (`C x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    space: ColorSpace,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImagePlane {
    /// Builds a plane from channel-major data, rejecting values outside
    /// `[0, 1]` and buffers whose length does not match the shape.
    pub fn new(space: ColorSpace, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let expected = space.channels() * height * width;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                what: "image plane buffer".into(),
                expected: vec![expected],
                found: vec![data.len()],
            });
        }
        check_unit_range("image plane", &data)?;
        Ok(Self {
            space,
            height,
            width,
            data,
        })
    }

    pub fn filled(space: ColorSpace, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(
            space,
            height,
            width,
            vec![value; space.channels() * height * width],
        )
    }

    /// Builds a plane by evaluating `f(channel, y, x)` at every element.
    pub fn from_fn(
        space: ColorSpace,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(space.channels() * height * width);
        for c in 0..space.channels() {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(space, height, width, data)
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn channels(&self) -> usize {
        self.space.channels()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels(), self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn pixel3(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    /// Reinterprets the plane as another space with the same channel count.
    pub fn relabel(mut self, space: ColorSpace) -> Result<Self> {
        if space.channels() != self.channels() {
            return Err(Error::Channels {
                what: "relabel",
                expected: space.channels(),
                found: self.channels(),
            });
        }
        self.space = space;
        Ok(self)
    }

    /// Returns a `1 x C x H x W` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(
            &self.data,
            (1, self.channels(), self.height, self.width),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Reads a `C x H x W` or `1 x C x H x W` tensor back into a plane.
    pub fn from_tensor(t: &Tensor, space: ColorSpace) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            _ => {
                return Err(Error::ShapeMismatch {
                    what: "image tensor rank".into(),
                    expected: vec![3],
                    found: vec![t.rank()],
                })
            }
        };
        let (c, h, w) = t.dims3()?;
        if c != space.channels() {
            return Err(Error::Channels {
                what: "image tensor",
                expected: space.channels(),
                found: c,
            });
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(space, h, w, data)
    }

    fn map_pixels3(&self, space: ColorSpace, f: impl Fn([f32; 3]) -> [f32; 3]) -> Self {
        let n = self.height * self.width;
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            let out = f([self.data[i], self.data[n + i], self.data[2 * n + i]]);
            data[i] = out[0];
            data[n + i] = out[1];
            data[2 * n + i] = out[2];
        }
        Self {
            space,
            height: self.height,
            width: self.width,
            data,
        }
    }
}

fn check_unit_range(what: &'static str, data: &[f32]) -> Result<()> {
    match data
        .iter()
        .position(|v| !(0.0..=1.0).contains(v))
    {
        Some(index) => Err(Error::OutOfRange {
            what,
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}

/// Hexcone RGB to HSV for a single pixel. Achromatic pixels get hue 0.
pub fn rgb_to_hsv_pixel(rgb: [f32; 3]) -> [f32; 3] {
    let [r, g, b] = rgb.map(f64::from);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let mut h = h as f32;
    if h >= 1.0 {
        h = 0.0;
    }
    [h, s as f32, max as f32]
}

/// Inverse hexcone. Hue `1.0` is accepted and treated as `0.0`.
pub fn hsv_to_rgb_pixel(hsv: [f32; 3]) -> [f32; 3] {
    let [h, s, v] = hsv.map(f64::from);
    let h6 = (h * 6.0).rem_euclid(6.0);
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match sector as u8 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

fn expect_space(img: &ImagePlane, space: ColorSpace, what: &'static str) -> Result<()> {
    if img.space() != space {
        return Err(Error::Channels {
            what,
            expected: space.channels(),
            found: img.channels(),
        });
    }
    check_unit_range(what, img.data())
}

pub fn rgb_to_hsv(img: &ImagePlane) -> Result<ImagePlane> {
    expect_space(img, ColorSpace::Rgb, "rgb_to_hsv input")?;
    Ok(img.map_pixels3(ColorSpace::Hsv, rgb_to_hsv_pixel))
}

pub fn hsv_to_rgb(img: &ImagePlane) -> Result<ImagePlane> {
    expect_space(img, ColorSpace::Hsv, "hsv_to_rgb input")?;
    Ok(img.map_pixels3(ColorSpace::Rgb, hsv_to_rgb_pixel))
}

/// Copies a single NIR channel into three identical RGB channels.
pub fn replicate_nir(img: &ImagePlane) -> Result<ImagePlane> {
    if img.channels() != 1 {
        return Err(Error::Channels {
            what: "replicate_nir input",
            expected: 1,
            found: img.channels(),
        });
    }
    let mut data = Vec::with_capacity(3 * img.data().len());
    for _ in 0..3 {
        data.extend_from_slice(img.data());
    }
    ImagePlane::new(ColorSpace::Rgb, img.height(), img.width(), data)
}

/// Batched `rgb_to_hsv` over an `N x 3 x H x W` tensor. Not differentiable;
/// used for supervision targets.
pub fn rgb_to_hsv_tensor(t: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Channels {
            what: "rgb_to_hsv batch",
            expected: 3,
            found: c,
        });
    }
    let dtype = t.dtype();
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    check_unit_range("rgb_to_hsv batch", &flat)?;
    let plane = h * w;
    let mut out = vec![0f32; flat.len()];
    for b in 0..n {
        let base = b * 3 * plane;
        for i in 0..plane {
            let px = [
                flat[base + i],
                flat[base + plane + i],
                flat[base + 2 * plane + i],
            ];
            let hsv = rgb_to_hsv_pixel(px);
            for ch in 0..3 {
                out[base + ch * plane + i] = hsv[ch];
            }
        }
    }
    Ok(Tensor::from_vec(out, (n, c, h, w), t.device())?.to_dtype(dtype)?)
}

/// HSV encoding of a replicated single-channel batch, `(0, 0, v)` per pixel.
///
/// Equal to `rgb_to_hsv(replicate_nir(x))` but expressed with tensor ops so
/// gradients reach `x` (the reverse cycle feeds generated NIR through here).
pub fn replicated_nir_hsv(x: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if c != 1 {
        return Err(Error::Channels {
            what: "replicated_nir_hsv input",
            expected: 1,
            found: c,
        });
    }
    let zeros = x.zeros_like()?;
    Ok(Tensor::cat(&[&zeros, &zeros, x], 1)?)
}
