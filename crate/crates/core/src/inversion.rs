//! Latent optimization of a target image into a generator's W+ space, with
//! per-layer noise maps optimized alongside and kept white by an
//! autocorrelation penalty.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{Generator, LatentWPlus, NoiseBundle};
use crate::imaging::{downsample, Image};
use crate::losses::perceptual::PerceptualNet;
use crate::optim::{Adam, AdamParams};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub steps: usize,
    pub lambda_noise: f64,
    pub lr_base: f64,
    pub lr_rampup_fraction: f64,
    pub lr_rampdown_fraction: f64,
    pub seed: u64,
    /// `z` draws averaged for the W+ initializer.
    pub mean_samples: usize,
    /// Seed of the `z` draws for the W+ initializer.
    pub mean_seed: u64,
    /// Compare images at this size instead of full resolution.
    pub perceptual_resolution: Option<usize>,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lambda_noise: 1e5,
            lr_base: 0.1,
            lr_rampup_fraction: 0.05,
            lr_rampdown_fraction: 0.25,
            seed: 0,
            mean_samples: 10_000,
            mean_seed: 0x3EA9,
            perceptual_resolution: None,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("inversion steps must be >= 1".into()));
        }
        if !self.lambda_noise.is_finite() || self.lambda_noise < 0.0 {
            return Err(Error::Config(format!(
                "lambda_noise must be finite and >= 0, got {}",
                self.lambda_noise
            )));
        }
        if self.lr_base.is_nan() || self.lr_base <= 0.0 {
            return Err(Error::Config(format!("lr_base must be > 0, got {}", self.lr_base)));
        }
        for (name, v) in [
            ("lr_rampup_fraction", self.lr_rampup_fraction),
            ("lr_rampdown_fraction", self.lr_rampdown_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.mean_samples == 0 {
            return Err(Error::Config("mean_samples must be >= 1".into()));
        }
        Ok(())
    }

    /// Cosine ramp-up over the first steps and cosine ramp-down over the last.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let t = step as f64 / self.steps as f64;
        let mut ramp = if self.lr_rampdown_fraction > 0.0 {
            ((1.0 - t) / self.lr_rampdown_fraction).min(1.0)
        } else {
            1.0
        };
        ramp = 0.5 - 0.5 * (ramp * std::f64::consts::PI).cos();
        if self.lr_rampup_fraction > 0.0 {
            ramp *= (t / self.lr_rampup_fraction).min(1.0);
        }
        self.lr_base * ramp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub total: f64,
    pub perceptual: f64,
    pub noise_reg: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub wplus_star: LatentWPlus,
    pub noise_star: NoiseBundle,
    /// Objective at each iterate, evaluated before that iterate's update.
    pub loss_trace: Vec<TracePoint>,
    pub final_perceptual: f64,
}

impl InversionResult {
    pub fn initial_perceptual(&self) -> f64 {
        self.loss_trace.first().map_or(f64::NAN, |p| p.perceptual)
    }

    /// Writes `{stem}.latent`, `{stem}.noise` and `{stem}_trace.csv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<SavedInversion> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let out = SavedInversion {
            latent: dir.join(format!("{stem}.latent")),
            noise: dir.join(format!("{stem}.noise")),
            trace: dir.join(format!("{stem}_trace.csv")),
        };
        self.wplus_star.save(&out.latent)?;
        self.noise_star.save(&out.noise)?;
        write_trace(&self.loss_trace, &out.trace)?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedInversion {
    pub latent: PathBuf,
    pub noise: PathBuf,
    pub trace: PathBuf,
}

pub fn write_trace(trace: &[TracePoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in trace {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TracePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Per-sample multi-scale autocorrelation penalty, shape `(B,)`: for every map
/// and each 2x box-downsampled level down to 8x8, the squared mean of the
/// products with its unit shifts along x and y (circular).
pub fn noise_regularization_per_sample(noise: &NoiseBundle) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for map in noise.maps() {
        let mut level = map.clone();
        loop {
            for dim in [3, 2] {
                let corr = (&level * level.roll(1, dim)?)?.flatten_from(1)?.mean(1)?.sqr()?;
                total = Some(match total {
                    None => corr,
                    Some(t) => (t + corr)?,
                });
            }
            let r = level.dim(2)?;
            if r <= 8 {
                break;
            }
            level = downsample(&level, r / 2)?;
        }
    }
    total.ok_or_else(|| Error::InvalidArgument("noise bundle has no maps".into()))
}

/// Sum over the batch of [`noise_regularization_per_sample`].
pub fn noise_regularization(noise: &NoiseBundle) -> Result<Tensor> {
    Ok(noise_regularization_per_sample(noise)?.sum_all()?)
}

/// Zero mean, unit second moment per sample and map.
pub fn normalize_noise(map: &Tensor) -> Result<Tensor> {
    let centered = map.broadcast_sub(&map.mean_keepdim(3)?.mean_keepdim(2)?)?;
    let scale = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(2)?.sqrt()?.recip()?;
    Ok(centered.broadcast_mul(&scale)?)
}

/// The optimizer's starting point for a batch of `batch` targets: the mean W+
/// code and seeded unit-Gaussian noise, normalized.
pub fn initial_state(g: &Generator, cfg: &InversionConfig, batch: usize) -> Result<(LatentWPlus, NoiseBundle)> {
    let mean = g.mean_wplus(cfg.mean_samples, cfg.mean_seed)?;
    let t = mean.tensor();
    let (_, l, d) = t.dims3()?;
    let ws = LatentWPlus::new(t.broadcast_as((batch, l, d))?.contiguous()?)?;
    Ok((ws, initial_noise(g, cfg, batch)?))
}

/// Every sample of the batch starts from the same draw so that a target's
/// result does not depend on its position in the batch.
pub fn initial_noise(g: &Generator, cfg: &InversionConfig, batch: usize) -> Result<NoiseBundle> {
    let mut r = rng::seeded(cfg.seed);
    let one = NoiseBundle::random(g.config(), 1, &mut r, g.device(), g.dtype())?;
    let maps = one
        .maps()
        .iter()
        .map(|m| {
            let m = normalize_noise(m)?;
            let (_, c, h, w) = m.dims4()?;
            Ok(m.broadcast_as((batch, c, h, w))?.contiguous()?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NoiseBundle::new(maps))
}

/// Inverts one image.
pub fn invert(g: &Generator, x: &Image, perceptual: &PerceptualNet, cfg: &InversionConfig) -> Result<InversionResult> {
    let mut out = invert_joint(g, std::slice::from_ref(x), perceptual, cfg)?;
    Ok(out.remove(0))
}

/// Inverts each image as an independent job on the rayon pool.
pub fn invert_batch(
    g: &Generator,
    xs: &[Image],
    perceptual: &PerceptualNet,
    cfg: &InversionConfig,
) -> Vec<Result<InversionResult>> {
    xs.par_iter().map(|x| invert(g, x, perceptual, cfg)).collect()
}

/// Optimizes all targets in one batch. The objective is a sum of per-target
/// terms and Adam acts elementwise, so each target follows its own trajectory.
pub fn invert_joint(
    g: &Generator,
    xs: &[Image],
    perceptual: &PerceptualNet,
    cfg: &InversionConfig,
) -> Result<Vec<InversionResult>> {
    cfg.validate()?;
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let res = g.resolution();
    if let Some(bad) = xs.iter().find(|x| x.height() != res || x.width() != res) {
        return Err(Error::Shape(format!(
            "inversion target is {}x{}, generator renders {res}x{res}",
            bad.height(),
            bad.width()
        )));
    }
    let b = xs.len();
    let target = compare_view(&Image::batch_to_tensor(xs, g.device(), g.dtype())?, cfg)?;

    let (ws0, noise0) = initial_state(g, cfg, b)?;
    let w_var = Var::from_tensor(ws0.tensor())?;
    let noise_vars = noise0
        .maps()
        .iter()
        .map(Var::from_tensor)
        .collect::<candle_core::Result<Vec<_>>>()?;
    let mut vars = vec![w_var.clone()];
    vars.extend(noise_vars.iter().cloned());
    let mut opt = Adam::new(vars, AdamParams::new(cfg.lr_base, 0.9, 0.999, 1e-8))?;

    let mut traces = vec![Vec::with_capacity(cfg.steps); b];
    for step in 0..cfg.steps {
        let lr = cfg.learning_rate(step);
        opt.set_lr(lr);
        let ws = LatentWPlus::new(w_var.as_tensor().clone())?;
        let noise = NoiseBundle::new(noise_vars.iter().map(|v| v.as_tensor().clone()).collect());
        let img = compare_view(&g.synthesize_frozen(&ws, &noise)?, cfg)?;
        let dist = perceptual.distance(&target, &img)?; // (B,)
        let reg = noise_regularization_per_sample(&noise)?;
        let total = (&dist + (&reg * cfg.lambda_noise)?)?;

        let d = to_f64(&dist)?;
        let r = to_f64(&reg)?;
        let t = to_f64(&total)?;
        if let Some(i) = t.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step,
                detail: format!(
                    "inversion objective {} for target {i} (perceptual {}, noise {})",
                    t[i], d[i], r[i]
                ),
            });
        }
        for i in 0..b {
            traces[i].push(TracePoint {
                step,
                total: t[i],
                perceptual: d[i],
                noise_reg: r[i],
                lr,
            });
        }

        let grads = total.sum_all()?.backward()?;
        opt.step(&grads)?;
        for v in &noise_vars {
            v.set(&normalize_noise(v.as_tensor())?)?;
        }
    }

    let w_final = w_var.as_tensor().detach();
    let n_final: Vec<Tensor> = noise_vars.iter().map(|v| v.as_tensor().detach()).collect();
    traces
        .into_iter()
        .enumerate()
        .map(|(i, loss_trace)| {
            let last = loss_trace
                .last()
                .copied()
                .ok_or_else(|| Error::Numerical("empty trace".into()))?;
            Ok(InversionResult {
                wplus_star: LatentWPlus::new(w_final.narrow(0, i, 1)?)?,
                noise_star: NoiseBundle::new(
                    n_final
                        .iter()
                        .map(|m| m.narrow(0, i, 1))
                        .collect::<candle_core::Result<Vec<_>>>()?,
                ),
                final_perceptual: last.total - cfg.lambda_noise * last.noise_reg,
                loss_trace,
            })
        })
        .collect()
}

/// Images are compared as they would be saved: clamped to the pixel range.
/// The distance is close to scale-invariant at large amplitudes, so an
/// unclamped objective lets the W+ gain drift far outside `[-1, 1]`.
fn compare_view(x: &Tensor, cfg: &InversionConfig) -> Result<Tensor> {
    let x = x.clamp(-1.0, 1.0)?;
    match cfg.perceptual_resolution {
        Some(r) if r < x.dim(2)? => downsample(&x, r),
        _ => Ok(x),
    }
}

fn to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::GeneratorConfig;
    use candle_core::Device;

    fn bundle(maps: Vec<Vec<f64>>, sizes: &[usize]) -> NoiseBundle {
        NoiseBundle::new(
            maps.into_iter()
                .zip(sizes)
                .map(|(m, &r)| Tensor::from_vec(m, (1, 1, r, r), &Device::Cpu).unwrap())
                .collect(),
        )
    }

    /// Direct loop over one map and its pyramid.
    fn brute_force(map: &[f64], r: usize) -> f64 {
        let mut level = map.to_vec();
        let mut n = r;
        let mut total = 0.0;
        loop {
            let (mut sx, mut sy) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let v = level[i * n + j];
                    sx += v * level[i * n + (j + n - 1) % n];
                    sy += v * level[((i + n - 1) % n) * n + j];
                }
            }
            let cells = (n * n) as f64;
            total += (sx / cells).powi(2) + (sy / cells).powi(2);
            if n <= 8 {
                return total;
            }
            let h = n / 2;
            level = (0..h * h)
                .map(|k| {
                    let (i, j) = (k / h, k % h);
                    (level[2 * i * n + 2 * j]
                        + level[2 * i * n + 2 * j + 1]
                        + level[(2 * i + 1) * n + 2 * j]
                        + level[(2 * i + 1) * n + 2 * j + 1])
                        / 4.0
                })
                .collect();
            n = h;
        }
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn constant_map_is_penalized() {
        let n = bundle(vec![vec![0.7; 64]], &[8]);
        let v = scalar(&noise_regularization(&n).unwrap());
        assert!((v - 2.0 * 0.7f64.powi(4)).abs() < 1e-12);
    }

    #[test]
    fn zero_maps_cost_nothing() {
        let n = bundle(vec![vec![0.0; 16], vec![0.0; 256]], &[4, 16]);
        assert_eq!(scalar(&noise_regularization(&n).unwrap()), 0.0);
    }

    #[test]
    fn matches_shifted_product_loop() {
        let a: Vec<f64> = (0..64).map(|k| ((k * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let b: Vec<f64> = (0..256).map(|k| ((k * 13 % 7) as f64).sin()).collect();
        let n = bundle(vec![a.clone(), b.clone()], &[8, 16]);
        let v = scalar(&noise_regularization(&n).unwrap());
        assert!((v - (brute_force(&a, 8) + brute_force(&b, 16))).abs() < 1e-8);
    }

    #[test]
    fn white_noise_is_nearly_free() {
        let mut r = rng::seeded(4);
        let m = rng::normal_tensor(&mut r, (1, 1, 64, 64), &Device::Cpu, DType::F64).unwrap();
        let v = scalar(&noise_regularization(&NoiseBundle::new(vec![m])).unwrap());
        assert!(v < 5e-3, "{v}");
    }

    #[test]
    fn normalized_noise_has_unit_moments() {
        let mut r = rng::seeded(5);
        let m = (rng::normal_tensor(&mut r, (2, 1, 16, 16), &Device::Cpu, DType::F64)
            .unwrap()
            .affine(3.0, 1.5))
        .unwrap();
        let n = normalize_noise(&m).unwrap();
        for i in 0..2 {
            let v = n.get(i).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let sq = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
            assert!(mean.abs() < 1e-12 && (sq - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_ramps_up_and_down() {
        let cfg = InversionConfig::default();
        assert_eq!(cfg.learning_rate(0), 0.0);
        assert!((cfg.learning_rate(25) - 0.1).abs() < 1e-12);
        assert!((cfg.learning_rate(250) - 0.1).abs() < 1e-12);
        assert!(cfg.learning_rate(450) < 0.1);
        assert!(cfg.learning_rate(499) < 1e-3);
    }

    #[test]
    fn defaults_and_validation() {
        let cfg = InversionConfig::default();
        assert_eq!((cfg.steps, cfg.lambda_noise), (500, 1e5));
        assert!(InversionConfig {
            steps: 0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(InversionConfig {
            lambda_noise: -1.0,
            ..cfg
        }
        .validate()
        .is_err());
    }

    fn small() -> (Generator, PerceptualNet) {
        let cfg = GeneratorConfig {
            resolution: 16,
            channel_base: 128,
            channel_max: 32,
            z_dim: 32,
            w_dim: 32,
            ..GeneratorConfig::toy()
        };
        let dev = Device::Cpu;
        (
            Generator::new(cfg, 1, &dev, DType::F32).unwrap(),
            PerceptualNet::toy(0x5EED, &dev, DType::F32).unwrap(),
        )
    }

    fn quick(steps: usize) -> InversionConfig {
        InversionConfig {
            steps,
            mean_samples: 256,
            ..InversionConfig::default()
        }
    }

    #[test]
    fn self_inversion_starts_at_the_noise_term() {
        let (g, p) = small();
        let cfg = quick(4);
        let (ws, noise) = initial_state(&g, &cfg, 1).unwrap();
        let x = Image::from_tensor(&g.synthesize_frozen(&ws, &noise).unwrap()).unwrap();
        let first = invert(&g, &x, &p, &cfg).unwrap().loss_trace[0];
        assert!(first.perceptual < 1e-9, "{}", first.perceptual);
        assert!((first.total - cfg.lambda_noise * first.noise_reg).abs() <= 1e-6 * first.total.max(1.0));
    }

    #[test]
    fn self_inversion_stays_at_the_initializer_without_noise_penalty() {
        // With the penalty on, the noise maps are pulled away from the
        // initial draw, so only the image term has its optimum at the start.
        // Adam still wanders off it on rounding-level gradients; the
        // rampdown brings it back.
        let (g, p) = small();
        let cfg = InversionConfig {
            lambda_noise: 0.0,
            ..quick(500)
        };
        let (ws, noise) = initial_state(&g, &cfg, 1).unwrap();
        let x = Image::from_tensor(&g.synthesize_frozen(&ws, &noise).unwrap()).unwrap();
        let res = invert(&g, &x, &p, &cfg).unwrap();
        assert!(res.final_perceptual <= 1e-3, "{}", res.final_perceptual);
    }

    #[test]
    fn trace_and_weights_contract() {
        let (g, p) = small();
        let before = g.weights_checksum().unwrap();
        let x = Image::from_fn(16, 16, |c, r, col| ((c + r * col) as f32 * 0.1).sin() * 0.8);
        let cfg = quick(12);
        let res = invert(&g, &x, &p, &cfg).unwrap();
        assert_eq!(res.loss_trace.len(), 12);
        assert!(res.loss_trace.iter().all(|t| t.total.is_finite()));
        let last = res.loss_trace.last().unwrap();
        assert_eq!(res.final_perceptual, last.total - cfg.lambda_noise * last.noise_reg);
        assert_eq!(g.weights_checksum().unwrap(), before);
        assert_eq!(res.wplus_star.tensor().dims(), &[1, g.num_ws(), 32]);
    }

    #[test]
    fn batched_matches_single() {
        let (g, p) = small();
        let xs: Vec<Image> = (0..3)
            .map(|k| {
                Image::from_fn(16, 16, |c, r, col| {
                    ((k + c * 3 + r + col * 2) as f32 * 0.21).cos() * 0.7
                })
            })
            .collect();
        let cfg = quick(8);
        let joint = invert_joint(&g, &xs, &p, &cfg).unwrap();
        for (x, j) in xs.iter().zip(&joint) {
            let s = invert(&g, x, &p, &cfg).unwrap();
            let a = s.wplus_star.to_vec().unwrap();
            let b = j.wplus_star.to_vec().unwrap();
            let diff = a.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(0f32, f32::max);
            assert!(diff < 1e-3, "{diff}");
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let (g, p) = small();
        let x = Image::from_fn(16, 16, |c, r, col| ((c * 5 + r * 3 + col) as f32 * 0.13).sin());
        let cfg = quick(6);
        let a = invert(&g, &x, &p, &cfg).unwrap();
        let b = invert(&g, &x, &p, &cfg).unwrap();
        assert!(a.wplus_star.bit_eq(&b.wplus_star).unwrap());
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn resolution_mismatch_is_rejected() {
        let (g, p) = small();
        assert!(invert(&g, &Image::filled(8, 8, 0.0), &p, &quick(2)).is_err());
    }

    #[test]
    fn result_files_round_trip() {
        let (g, p) = small();
        let x = Image::filled(16, 16, 0.2);
        let res = invert(&g, &x, &p, &quick(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let saved = res.save(dir.path(), "face").unwrap();
        let w = LatentWPlus::load(&saved.latent, &Device::Cpu, DType::F32).unwrap();
        assert!(w.bit_eq(&res.wplus_star).unwrap());
        assert_eq!(read_trace(&saved.trace).unwrap(), res.loss_trace);
        assert_eq!(
            NoiseBundle::load(&saved.noise, &Device::Cpu, DType::F32).unwrap().len(),
            res.noise_star.len()
        );
    }
}
