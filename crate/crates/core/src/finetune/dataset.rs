//! In-memory training sets of square images and the seeded batch sampler.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::generators::{Generator, LatentZ, NoiseBundle};
use crate::imaging::{blur_plane, load_image, BlurSpec, Image};
use crate::rng::{self, SeededRng};

#[derive(Debug, Clone, Default)]
pub struct ImageDataset {
    images: Vec<Image>,
}

impl ImageDataset {
    pub fn new(images: Vec<Image>) -> Result<Self> {
        if let Some(first) = images.first() {
            let (h, w) = (first.height(), first.width());
            if h != w {
                return Err(Error::Shape(format!("training images must be square, got {h}x{w}")));
            }
            if let Some(bad) = images.iter().find(|i| i.height() != h || i.width() != w) {
                return Err(Error::Shape(format!(
                    "mixed image sizes in dataset: {h}x{w} and {}x{}",
                    bad.height(),
                    bad.width()
                )));
            }
        }
        Ok(Self { images })
    }

    /// Loads every `*.png` in `dir`, sorted by file name.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        Self::new(paths.iter().map(load_image).collect::<Result<Vec<_>>>()?)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn resolution(&self) -> Option<usize> {
        self.images.first().map(|i| i.height())
    }

    pub fn mean_pixel(&self) -> f64 {
        if self.images.is_empty() {
            return 0.0;
        }
        self.images.iter().map(|i| i.mean()).sum::<f64>() / self.images.len() as f64
    }

    /// Each image followed by its mirror.
    pub fn amplify_xflip(&self) -> Self {
        let mut images = Vec::with_capacity(2 * self.images.len());
        for img in &self.images {
            images.push(img.clone());
            images.push(mirror(img));
        }
        Self { images }
    }

    /// Stylized stand-in for a rendering-style corpus: renders of `g_real`
    /// smoothed, posterized and tinted.
    pub fn stylized_toy(g_real: &Generator, count: usize, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        let cfg = g_real.config();
        let blur = BlurSpec::new(5, 1.5)?;
        let device = g_real.device();
        let mut images = Vec::with_capacity(count);
        let chunk = 16;
        let mut done = 0;
        while done < count {
            let n = chunk.min(count - done);
            let z = LatentZ::sample(&mut r, n, cfg.z_dim, device, g_real.dtype())?;
            let ws = g_real.map_to_wplus(&z)?;
            let noise = NoiseBundle::random(cfg, n, &mut r, device, g_real.dtype())?;
            let out = g_real.synthesize_frozen(&ws, &noise)?;
            for img in Image::batch_from_tensor(&out)? {
                images.push(stylize(&img, &blur));
            }
            done += n;
        }
        Self::new(images)
    }
}

fn mirror(img: &Image) -> Image {
    let w = img.width();
    Image::from_fn(img.height(), w, |c, r, col| img.get(c, r, w - 1 - col))
}

const POSTER_LEVELS: f32 = 5.0;
const TINT: [f32; 3] = [0.12, 0.02, -0.08];

fn stylize(img: &Image, blur: &BlurSpec) -> Image {
    let (h, w) = (img.height(), img.width());
    let planes: Vec<Vec<f32>> = (0..3).map(|c| blur_plane(img.plane(c), h, w, blur)).collect();
    Image::from_fn(h, w, |c, r, col| {
        let v = (planes[c][r * w + col] + TINT[c]).clamp(-1.0, 1.0);
        let q = ((v + 1.0) / 2.0 * (POSTER_LEVELS - 1.0)).round() / (POSTER_LEVELS - 1.0);
        q * 2.0 - 1.0
    })
}

/// Epoch-shuffled sampler; reshuffles when a pass is exhausted.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: SeededRng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidArgument(
                "cannot sample batches from an empty dataset".into(),
            ));
        }
        let mut s = Self {
            order: (0..len).collect(),
            cursor: 0,
            rng: rng::seeded(seed),
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_indices(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    pub fn next_batch(&mut self, ds: &ImageDataset, batch: usize, device: &Device, dtype: DType) -> Result<Tensor> {
        let picked: Vec<Image> = self
            .next_indices(batch)
            .into_iter()
            .map(|i| ds.images[i].clone())
            .collect();
        Image::batch_to_tensor(&picked, device, dtype)
    }
}
