//! Reduced adaptive discriminator augmentation: x-flip, integer translation
//! and brightness/contrast jitter, applied per image with probability `p`.

use candle_core::{Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imaging::{horizontal_flip, reflect_index};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Starting probability.
    pub initial_p: f64,
    /// Target value of `E[sign(D(real))]`.
    pub target: f64,
    /// Images needed for `p` to move from 0 to 1.
    pub speed_kimg: f64,
    /// Discriminator steps between probability updates.
    pub interval: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            initial_p: 0.0,
            target: 0.6,
            speed_kimg: 5.0,
            interval: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Augmenter {
    cfg: AugmentConfig,
    p: f64,
    sign_acc: f64,
    sign_count: usize,
    steps: usize,
}

impl Augmenter {
    pub fn new(cfg: AugmentConfig) -> Self {
        Self {
            p: cfg.initial_p.clamp(0.0, 1.0),
            cfg,
            sign_acc: 0.0,
            sign_count: 0,
            steps: 0,
        }
    }

    pub fn p(&self) -> f64 {
        if self.cfg.enabled {
            self.p
        } else {
            0.0
        }
    }

    /// Augments each image of `(B, 3, H, W)` independently. Differentiable
    /// with respect to `x`.
    pub fn apply(&self, x: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        let p = self.p();
        if p == 0.0 {
            return Ok(x.clone());
        }
        let (b, _, h, w) = x.dims4()?;
        let max_shift = (w / 8).max(1) as i64;
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let mut img = x.narrow(0, i, 1)?;
            if rng.random::<f64>() < p && rng.random::<bool>() {
                img = horizontal_flip(&img)?;
            }
            if rng.random::<f64>() < p {
                let dx = rng.random_range(-max_shift..=max_shift);
                let dy = rng.random_range(-max_shift..=max_shift);
                img = translate(&img, dy, dx, h, w, x.device())?;
            }
            if rng.random::<f64>() < p {
                let brightness = 0.2 * rng.sample::<f64, _>(rand_distr::StandardNormal);
                img = (img + brightness)?;
            }
            if rng.random::<f64>() < p {
                let contrast = (0.5 * std::f64::consts::LN_2 * rng.sample::<f64, _>(rand_distr::StandardNormal)).exp();
                let mean = img.mean_keepdim(3)?.mean_keepdim(2)?.mean_keepdim(1)?;
                img = (img.broadcast_sub(&mean)? * contrast)?.broadcast_add(&mean)?;
            }
            out.push(img);
        }
        Ok(Tensor::cat(&out, 0)?)
    }

    /// Feeds real logits; every `interval` calls adjusts `p` toward keeping
    /// the overfitting heuristic at `target`.
    pub fn observe_real_logits(&mut self, logits: &Tensor, batch: usize) -> Result<()> {
        if !self.cfg.enabled {
            return Ok(());
        }
        let v = logits
            .to_dtype(candle_core::DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        self.sign_acc += v.iter().map(|x| x.signum()).sum::<f64>();
        self.sign_count += v.len();
        self.steps += 1;
        if self.steps.is_multiple_of(self.cfg.interval.max(1)) && self.sign_count > 0 {
            let rt = self.sign_acc / self.sign_count as f64;
            let adjust =
                (rt - self.cfg.target).signum() * (batch * self.cfg.interval) as f64 / (self.cfg.speed_kimg * 1000.0);
            self.p = (self.p + adjust).clamp(0.0, 1.0);
            self.sign_acc = 0.0;
            self.sign_count = 0;
        }
        Ok(())
    }
}

fn translate(img: &Tensor, dy: i64, dx: i64, h: usize, w: usize, device: &Device) -> Result<Tensor> {
    let ids = |n: usize, d: i64| -> Result<Tensor> {
        let v: Vec<u32> = (0..n as isize)
            .map(|i| reflect_index(i - d as isize, n) as u32)
            .collect();
        Ok(Tensor::from_vec(v, n, device)?)
    };
    Ok(img.index_select(&ids(h, dy)?, 2)?.index_select(&ids(w, dx)?, 3)?)
}
