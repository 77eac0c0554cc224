//! Identity-preservation losses between the realistic generator and its
//! rendering-style clone.

pub mod perceptual;
pub mod sketch;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{GeneratorPair, LatentWPlus, NoiseBundle};
use crate::imaging::{downsample, gaussian_blur, BlurSpec};
pub use perceptual::{BackboneLayout, PerceptualNet, Pooling};
pub use sketch::{GradientSketch, SketchExtractor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_sketch: f64,
    pub lambda_color: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_sketch: 5e-6,
            lambda_color: 3.75e3,
        }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        lambda_sketch: 0.0,
        lambda_color: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_sketch >= 0.0 && self.lambda_color >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn combine(&self, l_sketch: f64, l_color: f64) -> f64 {
        self.lambda_sketch * l_sketch + self.lambda_color * l_color
    }

    pub fn is_zero(&self) -> bool {
        self.lambda_sketch == 0.0 && self.lambda_color == 0.0
    }
}

/// Loss settings that follow the generator resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    #[serde(flatten)]
    pub weights: LossWeights,
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub sketch_backend: String,
    pub perceptual_backend: String,
    /// Weights file for the `vgg16` perceptual backend.
    pub perceptual_weights: Option<std::path::PathBuf>,
    pub perceptual_seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            blur_kernel: 13,
            blur_sigma: 10.0,
            sketch_backend: "fallback".into(),
            perceptual_backend: "toy".into(),
            perceptual_weights: None,
            perceptual_seed: 0x5EED,
        }
    }
}

/// Sketch extractor and perceptual backbone bundled with the loss resolutions.
pub struct IdentityLoss {
    extractor: Box<dyn SketchExtractor>,
    perceptual: PerceptualNet,
    blur: BlurSpec,
    sketch_resolution: usize,
    color_resolution: usize,
    pub weights: LossWeights,
}

/// Scalar tensors of one loss evaluation.
pub struct LossTerms {
    pub sketch: Tensor,
    pub color: Tensor,
    pub total: Tensor,
}

impl LossTerms {
    pub fn values(&self) -> Result<(f64, f64, f64)> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok((v(&self.sketch)?, v(&self.color)?, v(&self.total)?))
    }
}

impl IdentityLoss {
    pub fn new(
        resolution: usize,
        extractor: Box<dyn SketchExtractor>,
        perceptual: PerceptualNet,
        blur: BlurSpec,
        weights: LossWeights,
    ) -> Result<Self> {
        weights.validate()?;
        if resolution < 4 {
            return Err(Error::Config("loss resolution must be at least 4".into()));
        }
        let sketch_resolution = resolution / 2;
        if extractor.resolution() != sketch_resolution {
            return Err(Error::Config(format!(
                "sketch extractor runs at {}, losses need {sketch_resolution}",
                extractor.resolution()
            )));
        }
        Ok(Self {
            extractor,
            perceptual,
            blur,
            sketch_resolution,
            color_resolution: resolution / 4,
            weights,
        })
    }

    pub fn from_config(cfg: &LossConfig, resolution: usize, device: &Device, dtype: DType) -> Result<Self> {
        let extractor: Box<dyn SketchExtractor> = match cfg.sketch_backend.as_str() {
            "fallback" => Box::new(GradientSketch::new(resolution / 2)?),
            "deepfaceediting" => {
                return Err(Error::BackendUnavailable(
                    "deepfaceediting sketch extractor weights are not bundled; use sketch_backend = \"fallback\""
                        .into(),
                ))
            }
            other => return Err(Error::Config(format!("unknown sketch_backend {other:?}"))),
        };
        let perceptual = match cfg.perceptual_backend.as_str() {
            "toy" => PerceptualNet::toy(cfg.perceptual_seed, device, dtype)?,
            "vgg16" => match &cfg.perceptual_weights {
                Some(p) => PerceptualNet::load(p, device, dtype)?,
                None => {
                    return Err(Error::BackendUnavailable(
                        "vgg16 perceptual backend needs perceptual_weights".into(),
                    ))
                }
            },
            other => return Err(Error::Config(format!("unknown perceptual_backend {other:?}"))),
        };
        Self::new(
            resolution,
            extractor,
            perceptual,
            BlurSpec::new(cfg.blur_kernel, cfg.blur_sigma)?,
            cfg.weights,
        )
    }

    pub fn toy(resolution: usize, device: &Device, dtype: DType) -> Result<Self> {
        Self::from_config(&LossConfig::default(), resolution, device, dtype)
    }

    pub fn with_weights(mut self, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        self.weights = weights;
        Ok(self)
    }

    pub fn perceptual(&self) -> &PerceptualNet {
        &self.perceptual
    }

    pub fn extractor(&self) -> &dyn SketchExtractor {
        self.extractor.as_ref()
    }

    pub fn blur(&self) -> &BlurSpec {
        &self.blur
    }

    /// Sketches of `(B, 3, R, R)` images after the ↓ to sketch resolution.
    pub fn sketches(&self, img: &Tensor) -> Result<Tensor> {
        self.extractor.extract(&downsample(img, self.sketch_resolution)?)
    }

    /// Mean absolute sketch difference over pixels and batch.
    pub fn sketch_distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok((self.sketches(a)? - self.sketches(b)?)?.abs()?.mean_all()?)
    }

    /// Batch-mean perceptual distance of the downsampled, blurred images.
    pub fn color_distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let prep = |x: &Tensor| gaussian_blur(&downsample(x, self.color_resolution)?, &self.blur);
        self.perceptual.distance_mean(&prep(a)?, &prep(b)?)
    }

    /// Evaluates both terms on one pair of renders. The realistic render is
    /// detached; gradients reach only the rendering generator's trainable
    /// weights.
    pub fn terms(&self, pair: &GeneratorPair, ws: &LatentWPlus, noise: &NoiseBundle) -> Result<LossTerms> {
        let ws = ws.detach();
        let noise = noise.detach();
        let real = pair.g_real.synthesize_frozen(&ws, &noise)?.detach();
        let fake = pair.g_rendering.synthesize(&ws, &noise)?;
        self.terms_from_images(&real, &fake)
    }

    pub fn terms_from_images(&self, real: &Tensor, fake: &Tensor) -> Result<LossTerms> {
        let sketch = self.sketch_distance(real, fake)?;
        let color = self.color_distance(real, fake)?;
        let total = ((&sketch * self.weights.lambda_sketch)? + (&color * self.weights.lambda_color)?)?;
        Ok(LossTerms { sketch, color, total })
    }

    pub fn sketch_loss(&self, pair: &GeneratorPair, ws: &LatentWPlus, noise: &NoiseBundle) -> Result<Tensor> {
        let real = pair.g_real.synthesize_frozen(&ws.detach(), noise)?.detach();
        self.sketch_distance(&real, &pair.g_rendering.synthesize(&ws.detach(), noise)?)
    }

    pub fn color_loss(&self, pair: &GeneratorPair, ws: &LatentWPlus, noise: &NoiseBundle) -> Result<Tensor> {
        let real = pair.g_real.synthesize_frozen(&ws.detach(), noise)?.detach();
        self.color_distance(&real, &pair.g_rendering.synthesize(&ws.detach(), noise)?)
    }

    pub fn identity_loss(&self, pair: &GeneratorPair, ws: &LatentWPlus, noise: &NoiseBundle) -> Result<Tensor> {
        Ok(self.terms(pair, ws, noise)?.total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{clone_for_finetune, Generator, GeneratorConfig, LatentZ};
    use crate::imaging::Image;
    use crate::rng;

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            resolution: 16,
            z_dim: 32,
            w_dim: 32,
            channel_base: 128,
            channel_max: 32,
            ..GeneratorConfig::toy()
        }
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn arithmetic_of_weighted_sum() {
        let v = LossWeights::default().combine(2.0, 0.001);
        assert!((v - 3.75001).abs() <= 1e-9, "{v}");
        assert_eq!(LossWeights::default().lambda_sketch, 5e-6);
        assert_eq!(LossWeights::default().lambda_color, 3.75e3);
        assert!(LossWeights {
            lambda_sketch: -1.0,
            lambda_color: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn default_blur_matches_reference_parameters() {
        let c = LossConfig::default();
        assert_eq!((c.blur_kernel, c.blur_sigma), (13, 10.0));
    }

    #[test]
    fn sketch_l1_matches_pixel_loop() {
        let dev = Device::Cpu;
        let loss = IdentityLoss::toy(16, &dev, DType::F64).unwrap();
        let a = Image::from_fn(16, 16, |c, r, col| ((r * 3 + col + c) as f32 * 0.41).sin());
        let b = Image::from_fn(16, 16, |c, r, col| ((r + col * 5 + 2 * c) as f32 * 0.23).cos());
        let (ta, tb) = (
            a.to_tensor(&dev, DType::F64).unwrap(),
            b.to_tensor(&dev, DType::F64).unwrap(),
        );
        let sa = loss
            .sketches(&ta)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let sb = loss
            .sketches(&tb)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(sa.len(), 64);
        let mut acc = 0.0;
        for i in 0..sa.len() {
            acc += (sa[i] - sb[i]).abs();
        }
        let expected = acc / sa.len() as f64;
        let got = scalar(&loss.sketch_distance(&ta, &tb).unwrap());
        assert!((got - expected).abs() <= 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn color_loss_prefers_color_shift_over_texture() {
        let dev = Device::Cpu;
        let loss = IdentityLoss::toy(64, &dev, DType::F32).unwrap();
        let base = Image::from_fn(64, 64, |c, r, col| {
            0.3 * ((r as f32 / 9.0).sin() + (col as f32 / 13.0).cos()) - 0.1 * c as f32
        });
        let mut shifted = base.clone();
        for r in 0..64 {
            for col in 0..64 {
                shifted.set(0, r, col, base.get(0, r, col) + 0.2);
            }
        }
        // Equal-L2 checkerboard texture spread over all channels.
        let amp = (0.2f32 * 0.2 / 3.0).sqrt();
        let texture = Image::from_fn(64, 64, |c, r, col| {
            base.get(c, r, col) + if (r + col) % 2 == 0 { amp } else { -amp }
        });
        let t = |i: &Image| i.to_tensor(&dev, DType::F32).unwrap();
        let d_color = scalar(&loss.color_distance(&t(&base), &t(&shifted)).unwrap());
        let d_tex = scalar(&loss.color_distance(&t(&base), &t(&texture)).unwrap());
        assert!(d_color > 0.0);
        assert!(d_color > d_tex, "color {d_color} vs texture {d_tex}");
    }

    #[test]
    fn cloned_pair_has_zero_losses_and_perturbation_is_positive() {
        let dev = Device::Cpu;
        let g = Generator::new(small_cfg(), 7, &dev, DType::F32).unwrap();
        let pair = clone_for_finetune(&g).unwrap();
        let loss = IdentityLoss::toy(16, &dev, DType::F32).unwrap();
        let mut r = rng::seeded(3);
        let z = LatentZ::sample(&mut r, 2, 32, &dev, DType::F32).unwrap();
        let ws = pair.g_real.map_to_wplus(&z).unwrap();
        let noise = NoiseBundle::random(pair.g_real.config(), 2, &mut r, &dev, DType::F32).unwrap();
        let (s, c, t) = loss.terms(&pair, &ws, &noise).unwrap().values().unwrap();
        assert!(s.abs() <= 1e-6 && c.abs() <= 1e-6 && t.abs() <= 1e-6, "{s} {c} {t}");

        let v = pair.g_rendering.params().var("synthesis.b8.conv0.weight").unwrap();
        let perturbed = (v.as_detached_tensor() * 1.5).unwrap();
        v.set(&perturbed).unwrap();
        let (s, c, t) = loss.terms(&pair, &ws, &noise).unwrap().values().unwrap();
        assert!(s > 0.0 && c > 0.0 && t > 0.0);
    }

    #[test]
    fn gradients_reach_only_trainable_rendering_weights() {
        let dev = Device::Cpu;
        let g = Generator::new(small_cfg(), 7, &dev, DType::F32).unwrap();
        let pair = clone_for_finetune(&g).unwrap();
        let v = pair.g_rendering.params().var("synthesis.b16.conv1.weight").unwrap();
        v.set(&(v.as_detached_tensor() * 0.7).unwrap()).unwrap();
        let loss = IdentityLoss::toy(16, &dev, DType::F32).unwrap();
        let mut r = rng::seeded(5);
        let z = LatentZ::sample(&mut r, 2, 32, &dev, DType::F32).unwrap();
        let ws = pair.g_real.map_to_wplus(&z).unwrap();
        let noise = NoiseBundle::random(pair.g_real.config(), 2, &mut r, &dev, DType::F32).unwrap();
        let grads = loss.identity_loss(&pair, &ws, &noise).unwrap().backward().unwrap();

        for (name, var) in pair.g_real.params().iter() {
            if !name.starts_with("mapping.") {
                assert!(grads.get(var.as_tensor()).is_none(), "g_real {name} got a gradient");
            }
        }
        for (name, var) in pair.g_rendering.params().iter() {
            let g = grads.get(var.as_tensor());
            if pair.g_rendering.is_frozen(name) {
                assert!(g.is_none(), "frozen {name} got a gradient");
            }
        }
        let trained = pair
            .g_rendering
            .trainable_vars()
            .iter()
            .filter(|(_, v)| grads.get(v.as_tensor()).is_some())
            .count();
        assert!(trained > 0);
    }
}
