//! Image primitives shared by the rest of the crate.
//!
//! Pixels live in `[-1, 1]`. Host-side images are planar CHW [`Image`]s; the
//! differentiable operations work on `(B, C, H, W)` tensors so they can sit
//! inside loss graphs.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar RGB raster with values nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "image buffer of {} values does not fit 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; Self::CHANNELS * height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(Self::CHANNELS * height * width);
        for c in 0..Self::CHANNELS {
            for r in 0..height {
                for col in 0..width {
                    data.push(f(c, r, col));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, r: usize, col: usize) -> f32 {
        self.data[(c * self.height + r) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, c: usize, r: usize, col: usize, v: f32) {
        self.data[(c * self.height + r) * self.width + col] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn clamped(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        }
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, Self::CHANNELS, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `(3, H, W)` or `(1, 3, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            3 => t.clone(),
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            _ => {
                return Err(Error::Shape(format!(
                    "expected (3,H,W) or (1,3,H,W), got {:?}",
                    t.dims()
                )))
            }
        };
        let (c, h, w) = t.dims3()?;
        if c != Self::CHANNELS {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Image::new(h, w, data)
    }

    /// Splits a `(B, 3, H, W)` batch into images.
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<Self>> {
        let b = t.dim(0)?;
        (0..b).map(|i| Image::from_tensor(&t.narrow(0, i, 1)?)).collect()
    }

    pub fn batch_to_tensor(images: &[Image], device: &Device, dtype: DType) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("empty image batch".into()));
        }
        let parts = images
            .iter()
            .map(|im| im.to_tensor(device, dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    }
}

/// Gaussian blur parameters: an odd tap count and a standard deviation in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurSpec {
    kernel_size: usize,
    sigma: f64,
}

impl BlurSpec {
    pub fn new(kernel_size: usize, sigma: f64) -> Result<Self> {
        if kernel_size == 0 || kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "blur kernel size must be odd and >= 1, got {kernel_size}"
            )));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "blur sigma must be positive, got {sigma}"
            )));
        }
        Ok(Self { kernel_size, sigma })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Normalized 1-D taps; the 2-D kernel is their outer product.
    pub fn weights(&self) -> Vec<f64> {
        gaussian_taps(self.kernel_size, self.sigma)
    }
}

pub(crate) fn gaussian_taps(kernel_size: usize, sigma: f64) -> Vec<f64> {
    let center = (kernel_size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..kernel_size)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mirror index into `[0, n)` without repeating the edge sample, folding as
/// often as needed so arbitrarily wide kernels work on tiny rasters.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

fn index_tensor(ids: &[u32], device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(ids, ids.len(), device)?)
}

fn reflect_pad_ids(n: usize, pad: usize) -> Vec<u32> {
    (-(pad as isize)..(n + pad) as isize)
        .map(|i| reflect_index(i, n) as u32)
        .collect()
}

/// Separable convolution with reflection padding, applied per channel.
///
/// `taps` has odd length and is used for both axes.
pub fn separable_filter(x: &Tensor, taps: &[f64]) -> Result<Tensor> {
    separable_filter_xy(x, taps, taps)
}

/// Like [`separable_filter`] with distinct horizontal and vertical taps.
pub fn separable_filter_xy(x: &Tensor, htaps: &[f64], vtaps: &[f64]) -> Result<Tensor> {
    if htaps.len().is_multiple_of(2) || vtaps.len().is_multiple_of(2) {
        return Err(Error::InvalidArgument("filter length must be odd".into()));
    }
    let (_, _, h, w) = x.dims4()?;
    let device = x.device();
    let padded = x.index_select(&index_tensor(&reflect_pad_ids(w, htaps.len() / 2), device)?, 3)?;
    let horiz = crate::nn::correlate_axis(&padded, htaps, 3)?;
    let padded = horiz.index_select(&index_tensor(&reflect_pad_ids(h, vtaps.len() / 2), device)?, 2)?;
    crate::nn::correlate_axis(&padded, vtaps, 2)
}

/// Per-channel Gaussian blur with reflection padding. Differentiable.
pub fn gaussian_blur(x: &Tensor, spec: &BlurSpec) -> Result<Tensor> {
    separable_filter(x, &spec.weights())
}

/// Mirrors the last (width) axis.
pub fn horizontal_flip(x: &Tensor) -> Result<Tensor> {
    let w = x.dim(x.rank() - 1)?;
    let ids: Vec<u32> = (0..w as u32).rev().collect();
    Ok(x.index_select(&index_tensor(&ids, x.device())?, x.rank() - 1)?)
}

/// Area-resampling matrix `(target, source)`: row `t` averages the source
/// interval covered by destination pixel `t`.
pub fn area_matrix(source: usize, target: usize) -> Vec<f64> {
    let scale = source as f64 / target as f64;
    let mut m = vec![0.0; target * source];
    for t in 0..target {
        let lo = t as f64 * scale;
        let hi = lo + scale;
        let first = lo.floor() as usize;
        let last = (hi.ceil() as usize).min(source);
        for s in first..last {
            let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
            m[t * source + s] = overlap / scale;
        }
    }
    m
}

/// Antialiased downsample of `(B, C, H, W)` to `(B, C, target, target)`.
///
/// Integer factors reduce to box averaging; other factors use exact
/// fractional pixel overlaps. Differentiable.
pub fn downsample(x: &Tensor, target: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if target == 0 {
        return Err(Error::InvalidArgument("downsample target must be >= 1".into()));
    }
    if target > h || target > w {
        return Err(Error::InvalidArgument(format!(
            "downsample target {target} exceeds source {h}x{w}; upsampling is not supported"
        )));
    }
    if target == h && target == w {
        return Ok(x.clone());
    }
    if h == w && h % target == 0 {
        let f = h / target;
        return Ok(x
            .reshape((b, c, target, f, target, f))?
            .sum_keepdim(5)?
            .sum_keepdim(3)?
            .reshape((b, c, target, target))?
            .affine(1.0 / (f * f) as f64, 0.0)?);
    }
    resample_separable(x, (target, &area_matrix(h, target)), (target, &area_matrix(w, target)))
}

/// Applies row-major `(th, h)` and `(tw, w)` matrices along the two spatial
/// axes of `(B, C, H, W)` as two matmuls. Differentiable.
pub fn resample_separable(x: &Tensor, rows: (usize, &[f64]), cols: (usize, &[f64])) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let ((th, mh), (tw, mw)) = (rows, cols);
    if mh.len() != th * h || mw.len() != tw * w {
        return Err(Error::Shape(format!(
            "resampling matrices of {} and {} entries for {h}x{w} -> {th}x{tw}",
            mh.len(),
            mw.len()
        )));
    }
    let device = x.device();
    // (n, t): column t holds the weights of destination pixel t.
    let matrix = |m: &[f64], t: usize, n: usize| -> Result<Tensor> {
        Ok(Tensor::from_vec(m.to_vec(), (t, n), device)?
            .to_dtype(x.dtype())?
            .t()?
            .contiguous()?)
    };
    let y = x.contiguous()?.reshape((b * c * h, w))?.matmul(&matrix(mw, tw, w)?)?; // (b*c*h, tw)
    let y = y.reshape((b * c, h, tw))?.transpose(1, 2)?.contiguous()?; // (b*c, tw, h)
    let y = y.reshape((b * c * tw, h))?.matmul(&matrix(mh, th, h)?)?; // (b*c*tw, th)
    Ok(y.reshape((b * c, tw, th))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, c, th, tw))?)
}

/// `(2n, n)` matrix of nearest 2x upsampling followed by a `[1, 2, 1] / 4`
/// pass with reflection padding; reduces to `[1/4, 3/4]` interpolation with
/// replicated edges.
pub fn smooth_upsample_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; 2 * n * n];
    for i in 0..n {
        let prev = i.saturating_sub(1);
        let next = (i + 1).min(n - 1);
        m[(2 * i) * n + prev] += 0.25;
        m[(2 * i) * n + i] += 0.75;
        m[(2 * i + 1) * n + i] += 0.75;
        m[(2 * i + 1) * n + next] += 0.25;
    }
    m
}

/// Nearest 2x followed by `[1, 2, 1] / 4` smoothing, as one linear map.
pub fn smooth_upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    resample_separable(
        x,
        (2 * h, &smooth_upsample_matrix(h)),
        (2 * w, &smooth_upsample_matrix(w)),
    )
}

/// Nearest-neighbour 2x upsample expressed with broadcasting so the backward
/// pass accumulates correctly when the input is reused.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Host-side Gaussian blur of a single `h x w` plane, same taps and padding as
/// [`gaussian_blur`]. Used where no gradient is needed and kernels are large.
pub fn blur_plane(plane: &[f32], h: usize, w: usize, spec: &BlurSpec) -> Vec<f32> {
    let taps = spec.weights();
    let pad = taps.len() as isize / 2;
    let mut tmp = vec![0f32; h * w];
    for r in 0..h {
        let row = &plane[r * w..(r + 1) * w];
        for c in 0..w {
            let mut acc = 0.0f64;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * row[reflect_index(c as isize + k as isize - pad, w)] as f64;
            }
            tmp[r * w + c] = acc as f32;
        }
    }
    let mut out = vec![0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0f64;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * tmp[reflect_index(r as isize + k as isize - pad, h) * w + c] as f64;
            }
            out[r * w + c] = acc as f32;
        }
    }
    out
}

/// Bilinear resize (pixel-centre aligned). Host-side only.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    if img.height == height && img.width == width {
        return img.clone();
    }
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    Image::from_fn(height, width, |c, r, col| {
        let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let x = ((col as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
        bilinear_clamped(img.plane(c), img.height, img.width, y, x)
    })
}

/// Samples a plane at fractional index coordinates, clamping to the border.
pub fn bilinear_clamped(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let p = |r: usize, c: usize| plane[r * w + c] as f64;
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// `[-1, 1] -> [0, 255]`, rounding half away from zero (so 0.0 maps to 128).
#[inline]
pub fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) as f64 + 1.0) * 127.5).round() as u8
}

#[inline]
pub fn from_u8(p: u8) -> f32 {
    (p as f64 / 127.5 - 1.0) as f32
}

/// Loads an 8-bit RGB PNG. Alpha is dropped with a warning; grey images are
/// rejected.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    dynamic_to_image(decoded, path)
}

/// Like [`load_image`] but accepts any decodable format (raw ingestion).
pub fn load_raw_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    dynamic_to_image(decoded, path)
}

fn dynamic_to_image(decoded: image::DynamicImage, path: &Path) -> Result<Image> {
    let channels = decoded.color().channel_count();
    if channels < 3 {
        return Err(Error::NonRgb {
            path: path.to_path_buf(),
            channels,
        });
    }
    if channels == 4 {
        log::warn!("{}: dropping alpha channel", path.display());
    }
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = from_u8(px[c]);
        }
    }
    Image::new(h, w, data)
}

/// Writes an 8-bit RGB PNG; values are clamped to `[-1, 1]` first.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (img.height, img.width);
    let mut raw = vec![0u8; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            raw[3 * i + c] = to_u8(img.data[c * h * w + i]);
        }
    }
    let buf =
        image::RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::Shape("rgb buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Writes a single-channel 8-bit PNG from values in `[0, 1]`.
pub fn save_gray(plane: &[f32], h: usize, w: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = plane
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf =
        image::GrayImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::Shape("gray buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Reads any 8-bit PNG as a single plane in `[0, 1]` (colour inputs use the
/// first channel). Returns `(plane, height, width)`.
pub fn load_gray(path: impl AsRef<Path>) -> Result<(Vec<f32>, usize, usize)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let g = decoded.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    Ok((g.as_raw().iter().map(|&p| p as f32 / 255.0).collect(), h, w))
}
