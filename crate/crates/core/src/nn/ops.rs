//! Differentiable tensor primitives on top of candle.
//!
//! Convolutions are lowered to `im2col` + gemm. `Im2Col` and `Col2Im` are
//! adjoint linear maps, so each one's backward pass is the other; transposed
//! convolution is the adjoint of convolution and falls out of the same pair.

use candle_core::{bail, CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

/// Sliding-window geometry of a convolution over a `c x h x w` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl WindowGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn cols_len(&self) -> usize {
        self.rows() * self.out_height() * self.out_width()
    }

    fn out_len(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Visits every horizontal run of window taps that lies inside the
    /// unpadded image. A run covers `len` consecutive output columns starting
    /// at `out` (offset within an output plane) and input pixels starting at
    /// `inp` (offset within an input plane) with step `stride`.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(Run)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let k = self.kernel;
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let ox_lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
                    let ox_hi = if self.width + self.pad > kx {
                        ((self.width + self.pad - kx - 1) / self.stride + 1).min(ow)
                    } else {
                        0
                    };
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        f(Run {
                            row,
                            channel: c,
                            out: oy * ow + ox_lo,
                            inp: iy as usize * self.width + ox_lo * self.stride + kx - self.pad,
                            len: ox_hi - ox_lo,
                        });
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Run {
    row: usize,
    channel: usize,
    out: usize,
    inp: usize,
    len: usize,
}

/// Strided copy or accumulate of one run; `acc` selects `+=`.
#[inline]
fn strided_into<T: WithDType>(dst: &mut [T], dst_step: usize, src: &[T], src_step: usize, len: usize, acc: bool) {
    match (dst_step, src_step, acc) {
        (1, 1, false) => dst[..len].copy_from_slice(&src[..len]),
        (1, 1, true) => dst[..len].iter_mut().zip(&src[..len]).for_each(|(d, s)| *d += *s),
        _ => {
            for i in 0..len {
                let v = src[i * src_step];
                let d = &mut dst[i * dst_step];
                *d = if acc { *d + v } else { v };
            }
        }
    }
}

fn im2col<T: WithDType>(src: &[T], batch: usize, g: &WindowGeometry) -> Vec<T> {
    let (il, cl, hw, ohw, s) = (g.image_len(), g.cols_len(), g.height * g.width, g.out_len(), g.stride);
    let mut dst = vec![T::zero(); batch * cl];
    for b in 0..batch {
        let img = &src[b * il..(b + 1) * il];
        let cols = &mut dst[b * cl..(b + 1) * cl];
        g.for_each_run(|r| {
            strided_into(&mut cols[r.row * ohw + r.out..], 1, &img[r.channel * hw + r.inp..], s, r.len, false)
        });
    }
    dst
}

fn col2im<T: WithDType>(src: &[T], batch: usize, g: &WindowGeometry) -> Vec<T> {
    let (il, cl, hw, ohw, s) = (g.image_len(), g.cols_len(), g.height * g.width, g.out_len(), g.stride);
    let mut dst = vec![T::zero(); batch * il];
    for b in 0..batch {
        let cols = &src[b * cl..(b + 1) * cl];
        let img = &mut dst[b * il..(b + 1) * il];
        g.for_each_run(|r| {
            strided_into(&mut img[r.channel * hw + r.inp..], s, &cols[r.row * ohw + r.out..], 1, r.len, true)
        });
    }
    dst
}

/// `N x (O*k*k) x H x W -> N x O x OH x OW`: every output pixel sums each
/// tap's response plane sampled at that tap's offset.
fn tap_gather<T: WithDType>(src: &[T], batch: usize, g: &WindowGeometry) -> Vec<T> {
    let (hw, ohw, s) = (g.height * g.width, g.out_len(), g.stride);
    let (zl, yl) = (g.rows() * hw, g.channels * ohw);
    let mut dst = vec![T::zero(); batch * yl];
    for b in 0..batch {
        let z = &src[b * zl..(b + 1) * zl];
        let y = &mut dst[b * yl..(b + 1) * yl];
        g.for_each_run(|r| {
            strided_into(&mut y[r.channel * ohw + r.out..], 1, &z[r.row * hw + r.inp..], s, r.len, true)
        });
    }
    dst
}

/// Adjoint of [`tap_gather`].
fn tap_scatter<T: WithDType>(src: &[T], batch: usize, g: &WindowGeometry) -> Vec<T> {
    let (hw, ohw, s) = (g.height * g.width, g.out_len(), g.stride);
    let (zl, yl) = (g.rows() * hw, g.channels * ohw);
    let mut dst = vec![T::zero(); batch * zl];
    for b in 0..batch {
        let y = &src[b * yl..(b + 1) * yl];
        let z = &mut dst[b * zl..(b + 1) * zl];
        g.for_each_run(|r| {
            strided_into(&mut z[r.row * hw + r.inp..], s, &y[r.channel * ohw + r.out..], 1, r.len, true)
        });
    }
    dst
}

/// `N x C x H x W -> N x (C*k*k) x (OH*OW)`, zero padding.
struct Im2Col(WindowGeometry);

/// Adjoint of [`Im2Col`]: scatter-adds columns back onto the image grid.
struct Col2Im(WindowGeometry);

/// `N x (O*k*k) x H x W -> N x O x OH x OW`, see [`tap_gather`].
struct TapGather(WindowGeometry);

/// Adjoint of [`TapGather`].
struct TapScatter(WindowGeometry);

fn contiguous_range(layout: &Layout, op: &str) -> candle_core::Result<(usize, usize)> {
    match layout.contiguous_offsets() {
        Some(r) => Ok(r),
        None => bail!("{op} requires a contiguous input"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.dims()[0];
        let (lo, hi) = contiguous_range(layout, "im2col")?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(&v[lo..hi], batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(&v[lo..hi], batch, g)),
            _ => bail!("im2col: unsupported dtype"),
        };
        Ok((out, Shape::from((batch, g.rows(), g.out_height() * g.out_width()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.dims()[0];
        let (lo, hi) = contiguous_range(layout, "col2im")?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(&v[lo..hi], batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(&v[lo..hi], batch, g)),
            _ => bail!("col2im: unsupported dtype"),
        };
        Ok((out, Shape::from((batch, g.channels, g.height, g.width))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0))?))
    }
}

impl CustomOp1 for TapGather {
    fn name(&self) -> &'static str {
        "tap-gather"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.dims()[0];
        let (lo, hi) = contiguous_range(layout, "tap-gather")?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(tap_gather(&v[lo..hi], batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(tap_gather(&v[lo..hi], batch, g)),
            _ => bail!("tap-gather: unsupported dtype"),
        };
        Ok((out, Shape::from((batch, g.channels, g.out_height(), g.out_width()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&TapScatter(self.0))?))
    }
}

impl CustomOp1 for TapScatter {
    fn name(&self) -> &'static str {
        "tap-scatter"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let batch = layout.dims()[0];
        let (lo, hi) = contiguous_range(layout, "tap-scatter")?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(tap_scatter(&v[lo..hi], batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(tap_scatter(&v[lo..hi], batch, g)),
            _ => bail!("tap-scatter: unsupported dtype"),
        };
        Ok((out, Shape::from((batch, g.rows(), g.height * g.width))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&TapGather(self.0))?))
    }
}

// candle's batched matmul mis-handles zero-stride batch dims, so broadcast
// operands are materialized first.
fn batched(weight: &Tensor, batch: usize) -> Result<Tensor> {
    Ok(weight.broadcast_left(batch)?.contiguous()?)
}

/// 2-D cross-correlation with square kernel and zero padding.
///
/// `x`: `N x C x H x W`, `weight`: `O x C x k x k`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 {
        return Err(Error::ShapeMismatch {
            what: "conv2d weight".into(),
            expected: vec![o, c, k, k],
            found: weight.dims().to_vec(),
        });
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::TooSmall {
            what: "conv2d input",
            height: h,
            width: w,
            min: k,
        });
    }
    let g = WindowGeometry {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        pad,
    };
    // Lower through whichever intermediate is smaller: input patches
    // (C*k*k rows at output resolution) or per-tap responses (O*k*k rows at
    // input resolution).
    if c * g.out_len() <= o * h * w {
        let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
        let wm = batched(&weight.reshape((o, c * k * k))?, n)?;
        Ok(wm.matmul(&cols)?.reshape((n, o, g.out_height(), g.out_width()))?)
    } else {
        let taps = WindowGeometry { channels: o, ..g };
        let wt = weight.permute((0, 2, 3, 1))?.reshape((o * k * k, c))?;
        let z = batched(&wt, n)?.matmul(&x.reshape((n, c, h * w))?)?;
        Ok(z.apply_op1(TapGather(taps))?)
    }
}

/// Transposed convolution, the adjoint of [`conv2d`] with the same stride and
/// padding. `weight`: `C_in x C_out x k x k`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, cin, h, w) = x.dims4()?;
    let (wc, cout, k, k2) = weight.dims4()?;
    if wc != cin || k != k2 {
        return Err(Error::ShapeMismatch {
            what: "conv_transpose2d weight".into(),
            expected: vec![cin, cout, k, k],
            found: weight.dims().to_vec(),
        });
    }
    let out_h = (h - 1) * stride + k - 2 * pad;
    let out_w = (w - 1) * stride + k - 2 * pad;
    let g = WindowGeometry {
        channels: cout,
        height: out_h,
        width: out_w,
        kernel: k,
        stride,
        pad,
    };
    let wm = batched(&weight.reshape((cin, cout * k * k))?.t()?, n)?;
    let cols = wm.matmul(&x.reshape((n, cin, h * w))?)?;
    Ok(cols.contiguous()?.apply_op1(Col2Im(g))?)
}

/// Linear-interpolation weights mapping `src` samples to `dst` samples with
/// half-pixel centers (edge samples are clamped).
pub fn interpolation_matrix(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        let frac = pos - i0 as f64;
        m[i * src + i0] += 1.0 - frac;
        m[i * src + i1] += frac;
    }
    m
}

/// Bilinear resize of an `N x C x H x W` tensor, expressed as two matmuls so
/// that it is differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let device = x.device();
    let dtype = x.dtype();
    // (W x OW) and (H x OH), i.e. the transposed interpolation matrices.
    let uw = Tensor::from_vec(interpolation_matrix(w, out_w), (out_w, w), device)?
        .to_dtype(dtype)?
        .t()?
        .contiguous()?;
    let uh = Tensor::from_vec(interpolation_matrix(h, out_h), (out_h, h), device)?
        .to_dtype(dtype)?
        .t()?
        .contiguous()?;
    let rows = x.contiguous()?.reshape((n * c * h, w))?.matmul(&uw)?;
    let cols = rows
        .reshape((n * c, h, out_w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n * c * out_w, h))?
        .matmul(&uh)?;
    Ok(cols
        .reshape((n * c, out_w, out_h))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n, c, out_h, out_w))?)
}

pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    resize_bilinear(x, h * factor, w * factor)
}

/// Parameter-free per-sample, per-channel standardization over spatial
/// positions: `(x - mean) / sqrt(var + eps)`.
pub fn instance_standardize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(2)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    let denom = (var + eps)?.sqrt()?;
    Ok(centered.broadcast_div(&denom)?.reshape((n, c, h, w))?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    // slope * x + (1 - slope) * relu(x)
    Ok(((x * slope)? + (x.relu()? * (1.0 - slope))?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Mean absolute difference over all elements.
pub fn mean_l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            what: "mean-L1 operands".into(),
            expected: a.dims().to_vec(),
            found: b.dims().to_vec(),
        });
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
