//! Dataset ingestion, augmentation, batch sampling and the synthetic
//! colormap dataset.
//!
//! On-disk layout is `<root>/nir/<stem>.png` (8-bit grayscale) and
//! `<root>/rgb/<stem>.png` (8-bit RGB); files are paired by stem.

use std::collections::BTreeMap;
use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorspace::{ColorSpace, ImagePlane};
use crate::error::{Error, Result};

pub const NIR_DIR: &str = "nir";
pub const RGB_DIR: &str = "rgb";

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub nir: ImagePlane,
    /// `None` for NIR-only (unpaired) samples.
    pub rgb: Option<ImagePlane>,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, nir: ImagePlane, rgb: Option<ImagePlane>) -> Result<Self> {
        let id = id.into();
        if nir.channels() != 1 {
            return Err(Error::Channels {
                what: "sample NIR image",
                expected: 1,
                found: nir.channels(),
            });
        }
        if let Some(rgb) = &rgb {
            if rgb.channels() != 3 {
                return Err(Error::Channels {
                    what: "sample RGB image",
                    expected: 3,
                    found: rgb.channels(),
                });
            }
            if (rgb.height(), rgb.width()) != (nir.height(), nir.width()) {
                return Err(Error::Data(format!(
                    "pair `{id}`: NIR is {}x{} but RGB is {}x{}",
                    nir.height(),
                    nir.width(),
                    rgb.height(),
                    rgb.width()
                )));
            }
        }
        Ok(Self { id, nir, rgb })
    }

    pub fn is_paired(&self) -> bool {
        self.rgb.is_some()
    }
}

/// Paired samples, NIR-only samples (as pairs without RGB) and RGB-only
/// images.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<SamplePair>,
    pub rgb_only: Vec<(String, ImagePlane)>,
}

impl Dataset {
    pub fn from_pairs(samples: Vec<SamplePair>) -> Self {
        Self {
            samples,
            rgb_only: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len() + self.rgb_only.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn paired_indices(&self) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].is_paired())
            .collect()
    }

    pub fn paired_count(&self) -> usize {
        self.samples.iter().filter(|s| s.is_paired()).count()
    }

    /// Every NIR image (paired or not) as `(id, image)`.
    pub fn nir_pool(&self) -> Vec<(&str, &ImagePlane)> {
        self.samples.iter().map(|s| (s.id.as_str(), &s.nir)).collect()
    }

    /// Every RGB image (paired or RGB-only) as `(id, image)`.
    pub fn rgb_pool(&self) -> Vec<(&str, &ImagePlane)> {
        self.samples
            .iter()
            .filter_map(|s| s.rgb.as_ref().map(|rgb| (s.id.as_str(), rgb)))
            .chain(self.rgb_only.iter().map(|(id, img)| (id.as_str(), img)))
            .collect()
    }
}

pub fn load_image(path: &Path, space: ColorSpace) -> Result<ImagePlane> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    match space {
        ColorSpace::Nir => {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            let data = g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            ImagePlane::new(ColorSpace::Nir, h as usize, w as usize, data)
        }
        ColorSpace::Rgb | ColorSpace::Hsv => {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            let (w, h) = (w as usize, h as usize);
            let raw = rgb.into_raw();
            ImagePlane::from_fn(ColorSpace::Rgb, h, w, |c, y, x| raw[(y * w + x) * 3 + c] as f32 / 255.0)
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a plane as an 8-bit PNG: grayscale for one channel, RGB for
/// three (HSV planes are written as their raw channels).
pub fn save_image(img: &ImagePlane, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (h, w) = (img.height() as u32, img.width() as u32);
    let result = if img.channels() == 1 {
        GrayImage::from_fn(w, h, |x, y| Luma([quantize(img.get(0, y as usize, x as usize))])).save(path)
    } else {
        RgbImage::from_fn(w, h, |x, y| {
            let p = img.pixel3(y as usize, x as usize);
            Rgb([quantize(p[0]), quantize(p[1]), quantize(p[2])])
        })
        .save(path)
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// PNG files in `dir` keyed by stem.
pub fn list_pngs(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png || !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

/// Loads `nir_dir` and `rgb_dir`, pairing files by stem in lexicographic
/// order. Stems present on one side only are kept as unpaired samples when
/// `allow_unpaired` is set and are an error otherwise.
pub fn load_pairs(nir_dir: &Path, rgb_dir: &Path, allow_unpaired: bool) -> Result<Dataset> {
    let nir_files = list_pngs(nir_dir)?;
    let rgb_files = list_pngs(rgb_dir)?;
    if !allow_unpaired {
        if let Some(stem) = nir_files.keys().find(|s| !rgb_files.contains_key(*s)) {
            return Err(Error::MissingCounterpart {
                stem: stem.clone(),
                present: nir_dir.to_path_buf(),
                absent: rgb_dir.to_path_buf(),
            });
        }
        if let Some(stem) = rgb_files.keys().find(|s| !nir_files.contains_key(*s)) {
            return Err(Error::MissingCounterpart {
                stem: stem.clone(),
                present: rgb_dir.to_path_buf(),
                absent: nir_dir.to_path_buf(),
            });
        }
    }

    let samples = nir_files
        .par_iter()
        .map(|(stem, nir_path)| {
            let nir = load_image(nir_path, ColorSpace::Nir)?;
            let rgb = match rgb_files.get(stem) {
                Some(p) => Some(load_image(p, ColorSpace::Rgb)?),
                None => None,
            };
            SamplePair::new(stem.clone(), nir, rgb)
        })
        .collect::<Result<Vec<_>>>()?;
    let rgb_only = rgb_files
        .par_iter()
        .filter(|(stem, _)| !nir_files.contains_key(*stem))
        .map(|(stem, p)| Ok((stem.clone(), load_image(p, ColorSpace::Rgb)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples, rgb_only })
}

/// Loads `<root>/nir` and `<root>/rgb`.
pub fn load_dataset(root: &Path, allow_unpaired: bool) -> Result<Dataset> {
    load_pairs(&root.join(NIR_DIR), &root.join(RGB_DIR), allow_unpaired)
}

/// Writes samples in the `<root>/{nir,rgb}/<id>.png` layout.
pub fn write_dataset(samples: &[SamplePair], root: &Path) -> Result<()> {
    for dir in [NIR_DIR, RGB_DIR] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    samples.par_iter().try_for_each(|s| {
        save_image(&s.nir, &root.join(NIR_DIR).join(format!("{}.png", s.id)))?;
        if let Some(rgb) = &s.rgb {
            save_image(rgb, &root.join(RGB_DIR).join(format!("{}.png", s.id)))?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    #[default]
    Random,
    Center,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub resize_range: (f64, f64),
    pub crop_size: usize,
    pub crop_mode: CropMode,
    pub contrast_range: (f64, f64),
    pub mirror_prob: f64,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            resize_range: (1.0, 1.2),
            crop_size: 256,
            crop_mode: CropMode::Random,
            contrast_range: (0.8, 1.2),
            mirror_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentSpec {
    pub fn desk() -> Self {
        Self {
            crop_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.crop_size % 8 != 0 {
            return Err(Error::Config(format!(
                "augment.crop_size must be a positive multiple of 8, got {}",
                self.crop_size
            )));
        }
        let (lo, hi) = self.resize_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("invalid augment.resize_range {:?}", self.resize_range)));
        }
        let (lo, hi) = self.contrast_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("invalid augment.contrast_range {:?}", self.contrast_range)));
        }
        if !(0.0..=1.0).contains(&self.mirror_prob) {
            return Err(Error::Config(format!("augment.mirror_prob must be in [0, 1], got {}", self.mirror_prob)));
        }
        Ok(())
    }

    /// Copy of the settings reseeded for one sample of one epoch.
    pub fn for_sample(&self, global_seed: u64, epoch: usize, id: &str) -> Self {
        Self {
            seed: derive_seed(global_seed, epoch as u64, id),
            ..self.clone()
        }
    }
}

/// Stable seed derivation from `(seed, epoch, id)` (FNV-1a then splitmix).
pub fn derive_seed(seed: u64, epoch: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in seed
        .to_le_bytes()
        .iter()
        .chain(epoch.to_le_bytes().iter())
        .chain(id.as_bytes())
    {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h = h.wrapping_add(0x9e3779b97f4a7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

fn resize_plane(img: &ImagePlane, height: usize, width: usize) -> Result<ImagePlane> {
    if (height, width) == (img.height(), img.width()) {
        return Ok(img.clone());
    }
    let (w, h) = (img.width() as u32, img.height() as u32);
    let channels = (0..img.channels())
        .map(|c| {
            let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
                ImageBuffer::from_raw(w, h, img.channel(c).to_vec()).expect("buffer size matches plane");
            imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle).into_raw()
        })
        .collect::<Vec<_>>();
    let data = channels
        .into_iter()
        .flatten()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    ImagePlane::new(img.space(), height, width, data)
}

fn crop_plane(img: &ImagePlane, y0: usize, x0: usize, size: usize, mirror: bool) -> Result<ImagePlane> {
    ImagePlane::from_fn(img.space(), size, size, |c, y, x| {
        let sx = if mirror { size - 1 - x } else { x };
        img.get(c, y0 + y, x0 + sx)
    })
}

fn adjust_contrast(img: ImagePlane, factor: f64) -> Result<ImagePlane> {
    if factor == 1.0 {
        return Ok(img);
    }
    let (space, h, w) = (img.space(), img.height(), img.width());
    let data = img
        .into_data()
        .into_iter()
        .map(|v| (((v as f64 - 0.5) * factor + 0.5).clamp(0.0, 1.0)) as f32)
        .collect();
    ImagePlane::new(space, h, w, data)
}

/// Random resize, crop, mirror and contrast change, applied identically to
/// both members of a pair. Deterministic in `spec.seed`.
pub fn augment(pair: &SamplePair, spec: &AugmentSpec) -> Result<SamplePair> {
    let mut planes: Vec<&ImagePlane> = vec![&pair.nir];
    planes.extend(pair.rgb.as_ref());
    let mut out = augment_planes(&pair.id, &planes, spec)?.into_iter();
    let nir = out.next().expect("one output per input");
    SamplePair::new(pair.id.clone(), nir, out.next())
}

/// [`augment`] for a single image.
pub fn augment_image(id: &str, img: &ImagePlane, spec: &AugmentSpec) -> Result<ImagePlane> {
    Ok(augment_planes(id, &[img], spec)?.remove(0))
}

fn augment_planes(id: &str, planes: &[&ImagePlane], spec: &AugmentSpec) -> Result<Vec<ImagePlane>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.resize_range;
    let scale = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let height = (planes[0].height() as f64 * scale).round() as usize;
    let width = (planes[0].width() as f64 * scale).round() as usize;
    let size = spec.crop_size;
    if size > height || size > width {
        return Err(Error::Data(format!(
            "sample `{id}`: crop {size} exceeds resized image {height}x{width}"
        )));
    }
    let (y0, x0) = match spec.crop_mode {
        CropMode::Random => (rng.gen_range(0..=height - size), rng.gen_range(0..=width - size)),
        CropMode::Center => ((height - size) / 2, (width - size) / 2),
    };
    let mirror = rng.gen_bool(spec.mirror_prob);
    let (clo, chi) = spec.contrast_range;
    let contrast = if clo == chi { clo } else { rng.gen_range(clo..=chi) };

    planes
        .iter()
        .map(|img| {
            let resized = resize_plane(img, height, width)?;
            adjust_contrast(crop_plane(&resized, y0, x0, size, mirror)?, contrast)
        })
        .collect()
}

/// Injective colormap used by the synthetic dataset: red encodes the input
/// directly, so distinct inputs always map to distinct colors.
pub fn synthetic_colormap(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    [t, 0.1 + 0.8 * (PI * t).sin(), (1.0 - t) * (1.0 - t)]
}

fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f32> {
    let grid: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen::<f32>()).collect();
    let mut out = vec![0.0; size * size];
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    for y in 0..size {
        let gy = y as f32 / size as f32 * cells as f32;
        let (iy, fy) = (gy.floor() as usize, smooth(gy.fract()));
        for x in 0..size {
            let gx = x as f32 / size as f32 * cells as f32;
            let (ix, fx) = (gx.floor() as usize, smooth(gx.fract()));
            let at = |yy: usize, xx: usize| grid[yy * (cells + 1) + xx];
            let top = at(iy, ix) * (1.0 - fx) + at(iy, ix + 1) * fx;
            let bottom = at(iy + 1, ix) * (1.0 - fx) + at(iy + 1, ix + 1) * fx;
            out[y * size + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// `n` pairs of `size x size` images: NIR is a smooth two-octave value-noise
/// field quantized to 8 bits, RGB is [`synthetic_colormap`] of it.
pub fn make_synthetic_pairs(n: usize, size: usize, seed: u64) -> Result<Vec<SamplePair>> {
    if size == 0 || size % 8 != 0 {
        return Err(Error::Config(format!("synthetic size must be a positive multiple of 8, got {size}")));
    }
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, &format!("synthetic-{i}")));
            let coarse = value_noise(&mut rng, size, (size / 16).max(2));
            let fine = value_noise(&mut rng, size, (size / 4).max(4));
            let raw: Vec<f32> = coarse.iter().zip(&fine).map(|(c, f)| c + 0.35 * f).collect();
            let (lo, hi) = raw.iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            let span = (hi - lo).max(1e-6);
            let nir_data: Vec<f32> = raw
                .iter()
                .map(|v| f32::from(quantize(0.05 + 0.9 * (v - lo) / span)) / 255.0)
                .collect();
            let nir = ImagePlane::new(ColorSpace::Nir, size, size, nir_data)?;
            let rgb = ImagePlane::from_fn(ColorSpace::Rgb, size, size, |c, y, x| {
                synthetic_colormap(nir.get(0, y, x))[c]
            })?;
            SamplePair::new(format!("synth_{i:04}"), nir, Some(rgb))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Paired,
    Unpaired,
}

/// Images for one optimization step. In paired mode `nir_ids == rgb_ids`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub mode: SampleMode,
    pub nir_ids: Vec<String>,
    pub rgb_ids: Vec<String>,
    pub nir: Vec<ImagePlane>,
    pub rgb: Vec<ImagePlane>,
}

impl Batch {
    pub fn nir_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        stack_planes(&self.nir, dtype, device)
    }

    pub fn rgb_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        stack_planes(&self.rgb, dtype, device)
    }
}

/// Stacks equally-sized planes into `N x C x H x W`.
pub fn stack_planes(planes: &[ImagePlane], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = planes
        .first()
        .ok_or_else(|| Error::Data("cannot stack an empty batch".into()))?;
    let (c, h, w) = first.dims();
    let mut data = Vec::with_capacity(planes.len() * c * h * w);
    for p in planes {
        if p.dims() != (c, h, w) {
            return Err(Error::ShapeMismatch {
                what: "batch member".into(),
                expected: vec![c, h, w],
                found: vec![p.channels(), p.height(), p.width()],
            });
        }
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::from_vec(data, (planes.len(), c, h, w), device)?.to_dtype(dtype)?)
}

/// Without-replacement index stream: a fresh permutation is drawn whenever
/// the previous one is exhausted.
#[derive(Debug, Clone)]
pub struct IndexStream {
    len: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl IndexStream {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            order: Vec::new(),
            cursor: 0,
        }
    }

    pub fn next(&mut self, rng: &mut impl Rng) -> usize {
        if self.cursor == self.order.len() {
            self.order = (0..self.len).collect();
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    pub fn take(&mut self, count: usize, rng: &mut impl Rng) -> Vec<usize> {
        (0..count).map(|_| self.next(rng)).collect()
    }
}

/// Splits one shuffled pass over `len` items into batches of at most
/// `batch_size`; every index appears exactly once.
pub fn epoch_batches(len: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn paired_batch(dataset: &Dataset, indices: &[usize]) -> Result<Batch> {
    let mut batch = Batch {
        mode: SampleMode::Paired,
        nir_ids: Vec::with_capacity(indices.len()),
        rgb_ids: Vec::with_capacity(indices.len()),
        nir: Vec::with_capacity(indices.len()),
        rgb: Vec::with_capacity(indices.len()),
    };
    for &i in indices {
        let s = &dataset.samples[i];
        let rgb = s
            .rgb
            .as_ref()
            .ok_or_else(|| Error::Data(format!("sample `{}` has no RGB counterpart", s.id)))?;
        batch.nir_ids.push(s.id.clone());
        batch.rgb_ids.push(s.id.clone());
        batch.nir.push(s.nir.clone());
        batch.rgb.push(rgb.clone());
    }
    Ok(batch)
}

pub fn unpaired_batch(dataset: &Dataset, nir_idx: &[usize], rgb_idx: &[usize]) -> Batch {
    let nir_pool = dataset.nir_pool();
    let rgb_pool = dataset.rgb_pool();
    Batch {
        mode: SampleMode::Unpaired,
        nir_ids: nir_idx.iter().map(|&i| nir_pool[i].0.to_string()).collect(),
        rgb_ids: rgb_idx.iter().map(|&i| rgb_pool[i].0.to_string()).collect(),
        nir: nir_idx.iter().map(|&i| nir_pool[i].1.clone()).collect(),
        rgb: rgb_idx.iter().map(|&i| rgb_pool[i].1.clone()).collect(),
    }
}

/// Draws one batch: paired mode takes `batch_size` distinct paired samples;
/// unpaired mode draws the NIR and RGB sides independently.
pub fn sample_batch(dataset: &Dataset, mode: SampleMode, batch_size: usize, rng: &mut impl Rng) -> Result<Batch> {
    match mode {
        SampleMode::Paired => {
            let paired = dataset.paired_indices();
            if paired.is_empty() {
                return Err(Error::Data("paired sampling requested but the dataset has no pairs".into()));
            }
            let chosen: Vec<usize> = paired
                .choose_multiple(rng, batch_size.min(paired.len()))
                .copied()
                .collect();
            paired_batch(dataset, &chosen)
        }
        SampleMode::Unpaired => {
            let (n_nir, n_rgb) = (dataset.nir_pool().len(), dataset.rgb_pool().len());
            if n_nir == 0 || n_rgb == 0 {
                return Err(Error::Data("unpaired sampling needs both NIR and RGB images".into()));
            }
            let nir: Vec<usize> = rand::seq::index::sample(rng, n_nir, batch_size.min(n_nir)).into_vec();
            let rgb: Vec<usize> = rand::seq::index::sample(rng, n_rgb, batch_size.min(n_rgb)).into_vec();
            Ok(unpaired_batch(dataset, &nir, &rgb))
        }
    }
}
