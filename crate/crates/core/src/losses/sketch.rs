//! Sketch extractors: differentiable maps from RGB to a single-channel edge
//! map in `[0, 1]`.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur, separable_filter_xy, BlurSpec};

pub trait SketchExtractor: Send + Sync {
    /// `(B, 3, R, R)` at [`Self::resolution`] to `(B, 1, R, R)`.
    fn extract(&self, img: &Tensor) -> Result<Tensor>;

    fn resolution(&self) -> usize;

    fn name(&self) -> &str;
}

/// Gradient-magnitude sketch: luma, Gaussian pre-smoothing, central
/// differences, then `tanh(|grad| / scale)`.
#[derive(Debug, Clone)]
pub struct GradientSketch {
    resolution: usize,
    smoothing: BlurSpec,
    scale: f64,
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

impl GradientSketch {
    pub fn new(resolution: usize) -> Result<Self> {
        Self::with_params(resolution, BlurSpec::new(5, 1.0)?, 0.25)
    }

    pub fn with_params(resolution: usize, smoothing: BlurSpec, scale: f64) -> Result<Self> {
        if resolution == 0 || scale <= 0.0 {
            return Err(Error::InvalidArgument(
                "sketch resolution and scale must be positive".into(),
            ));
        }
        Ok(Self {
            resolution,
            smoothing,
            scale,
        })
    }
}

impl SketchExtractor for GradientSketch {
    fn extract(&self, img: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = img.dims4()?;
        if c != 3 || h != self.resolution || w != self.resolution {
            return Err(Error::Shape(format!(
                "sketch extractor expects (B, 3, {r}, {r}), got ({b}, {c}, {h}, {w})",
                r = self.resolution
            )));
        }
        let luma = Tensor::from_slice(&LUMA, (1, 3, 1, 1), img.device())?.to_dtype(img.dtype())?;
        let gray = img.broadcast_mul(&luma)?.sum_keepdim(1)?;
        let smooth = gaussian_blur(&gray, &self.smoothing)?;
        let gx = separable_filter_xy(&smooth, &[-0.5, 0.0, 0.5], &[1.0])?;
        let gy = separable_filter_xy(&smooth, &[1.0], &[-0.5, 0.0, 0.5])?;
        let mag = ((gx.sqr()? + gy.sqr()?)? + 1e-6)?.sqrt()?;
        Ok((mag * (1.0 / self.scale))?.tanh()?)
    }

    fn resolution(&self) -> usize {
        self.resolution
    }

    fn name(&self) -> &str {
        "fallback"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{horizontal_flip, Image};
    use candle_core::{DType, Device};

    fn tensor(img: &Image) -> Tensor {
        img.to_tensor(&Device::Cpu, DType::F32).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    #[test]
    fn constant_image_has_no_edges() {
        let s = GradientSketch::new(16).unwrap();
        let out = values(&s.extract(&tensor(&Image::filled(16, 16, 0.3))).unwrap());
        let mean = out.iter().sum::<f32>() / out.len() as f32;
        assert!(mean <= 0.05, "{mean}");
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn flip_equivariant() {
        let s = GradientSketch::new(16).unwrap();
        let img = Image::from_fn(16, 16, |c, r, col| ((r * 7 + col * 3 + c) as f32 * 0.37).sin());
        let x = tensor(&img);
        let a = horizontal_flip(&s.extract(&x).unwrap()).unwrap();
        let b = s.extract(&horizontal_flip(&x).unwrap()).unwrap();
        let d = values(&(a - b).unwrap().abs().unwrap());
        assert!(d.iter().all(|v| *v <= 1e-4));
    }

    #[test]
    fn vertical_step_edge_peaks_on_edge_columns() {
        let s = GradientSketch::new(16).unwrap();
        let img = Image::from_fn(16, 16, |_, _, col| if col < 8 { -1.0 } else { 1.0 });
        let out = values(&s.extract(&tensor(&img)).unwrap());
        for r in 0..16 {
            let row = &out[r * 16..(r + 1) * 16];
            let peak = row.iter().cloned().fold(f32::MIN, f32::max);
            assert!((row[7] - peak).abs() < 1e-6 && (row[8] - peak).abs() < 1e-6);
            assert!(row[0] < 0.5 * peak && row[15] < 0.5 * peak);
        }
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let s = GradientSketch::new(16).unwrap();
        assert!(s.extract(&tensor(&Image::filled(8, 8, 0.0))).is_err());
    }
}
