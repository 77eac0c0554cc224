//! Adversarial fine-tuning of the rendering-style clone with the identity
//! losses added to the generator objective.

pub mod augment;
pub mod dataset;
pub mod discriminator;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{GeneratorPair, LatentWPlus, LatentZ, NoiseBundle};
use crate::losses::{IdentityLoss, LossWeights};
use crate::optim::{Adam, AdamParams};
use crate::rng::{self, SeededRng};
use crate::tensor_file::write_atomic;

pub use augment::{AugmentConfig, Augmenter};
pub use dataset::{BatchSampler, ImageDataset};
pub use discriminator::{adversarial_losses, AdversarialLosses, Critic, Discriminator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub generator_lr: f64,
    pub discriminator_lr: f64,
    pub r1_gamma: f64,
    /// Discriminator steps between R1 evaluations; the penalty is scaled by
    /// this interval.
    pub r1_interval: usize,
    /// Thousands of real images shown to the discriminator.
    pub kimg_budget: f64,
    pub xflip: bool,
    /// Taken from the loss configuration; not serialized with this section.
    #[serde(skip)]
    pub loss_weights: LossWeights,
    pub style_mixing_prob: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            generator_lr: 2.5e-3,
            discriminator_lr: 2.5e-3,
            r1_gamma: 0.1,
            r1_interval: 16,
            kimg_budget: 40.0,
            xflip: true,
            loss_weights: LossWeights::default(),
            style_mixing_prob: 0.0,
            augment: AugmentConfig::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kimg_budget.is_nan() || self.kimg_budget <= 0.0 {
            return Err(Error::Config("kimg_budget must be positive".into()));
        }
        if self.generator_lr.is_nan()
            || self.generator_lr <= 0.0
            || self.discriminator_lr.is_nan()
            || self.discriminator_lr <= 0.0
        {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.r1_gamma.is_nan() || self.r1_gamma < 0.0 || !(0.0..=1.0).contains(&self.style_mixing_prob) {
            return Err(Error::Config(
                "r1_gamma must be >= 0 and style_mixing_prob in [0, 1]".into(),
            ));
        }
        self.loss_weights.validate()
    }

    pub fn reals_budget(&self) -> u64 {
        (self.kimg_budget * 1000.0).ceil() as u64
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub reals_seen: u64,
    #[serde(rename = "L_sketch")]
    pub l_sketch: f64,
    #[serde(rename = "L_color")]
    pub l_color: f64,
    pub g_adv: f64,
    pub d_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub reals_seen: u64,
    pub last_checkpoint: Option<PathBuf>,
}

/// Where the run writes its metrics log and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub dir: Option<PathBuf>,
}

impl RunOutputs {
    pub fn none() -> Self {
        Self { dir: None }
    }

    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    pub fn metrics_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("metrics.jsonl"))
    }
}

pub struct FinetuneOutcome {
    pub pair: GeneratorPair,
    pub discriminator: Discriminator,
    pub state: TrainState,
    pub log: Vec<StepRecord>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// W+ codes for a fresh batch of `z`, optionally style-mixed at a random
/// crossover row.
fn sample_ws(pair: &GeneratorPair, batch: usize, mixing: f64, rng: &mut SeededRng) -> Result<LatentWPlus> {
    let g = &pair.g_real;
    let cfg = g.config();
    let z = LatentZ::sample(rng, batch, cfg.z_dim, g.device(), g.dtype())?;
    let ws = g.map_to_wplus(&z)?.detach();
    if mixing > 0.0 && rng.random::<f64>() < mixing {
        let z2 = LatentZ::sample(rng, batch, cfg.z_dim, g.device(), g.dtype())?;
        let ws2 = g.map_to_wplus(&z2)?.detach();
        let l = cfg.num_ws();
        let cut = rng.random_range(1..l);
        let mixed = Tensor::cat(
            &[ws.tensor().narrow(1, 0, cut)?, ws2.tensor().narrow(1, cut, l - cut)?],
            1,
        )?;
        return LatentWPlus::new(mixed);
    }
    Ok(ws)
}

/// Runs fine-tuning until `cfg.kimg_budget` thousand reals have been shown.
pub fn finetune(
    pair: GeneratorPair,
    discriminator: Discriminator,
    dataset: &ImageDataset,
    losses: &IdentityLoss,
    cfg: &FinetuneConfig,
    outputs: &RunOutputs,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning dataset is empty".into()));
    }
    let res = pair.resolution();
    if dataset.resolution() != Some(res) || discriminator.resolution() != res {
        return Err(Error::Shape(format!(
            "generator is {res}px but dataset is {:?}px and discriminator {}px",
            dataset.resolution(),
            discriminator.resolution()
        )));
    }
    pair.verify_invariants()?;
    let dataset = if cfg.xflip {
        dataset.amplify_xflip()
    } else {
        dataset.clone()
    };

    let device = pair.g_real.device().clone();
    let dtype = pair.g_real.dtype();
    let frozen_checksum = pair.g_rendering.frozen_checksum()?;
    let trainable = pair.g_rendering.trainable_vars();
    let trainable_ids: Vec<_> = trainable.iter().map(|(_, v)| v.as_tensor().id()).collect();
    let frozen_vars: Vec<_> = pair
        .g_rendering
        .params()
        .iter()
        .filter(|(_, v)| !trainable_ids.contains(&v.as_tensor().id()))
        .map(|(_, v)| v.clone())
        .collect();
    let mut g_opt = Adam::new(
        trainable.into_iter().map(|(_, v)| v).collect(),
        AdamParams::new(cfg.generator_lr, 0.0, 0.99, 1e-8),
    )?;
    let mut d_opt = Adam::new(
        discriminator.vars(),
        AdamParams::new(cfg.discriminator_lr, 0.0, 0.99, 1e-8),
    )?;

    let mut sampler = BatchSampler::new(dataset.len(), rng::derive_seed(cfg.seed, 1))?;
    let mut latent_rng = rng::seeded(rng::derive_seed(cfg.seed, 2));
    let mut aug_rng = rng::seeded(rng::derive_seed(cfg.seed, 3));
    let mut augmenter = Augmenter::new(cfg.augment.clone());
    let losses_weights = cfg.loss_weights;

    let mut metrics = match outputs.metrics_path() {
        Some(p) => {
            std::fs::create_dir_all(p.parent().unwrap()).map_err(|e| Error::io(&p, e))?;
            Some(
                OpenOptions::new()
                    .create(true)
                    .write(true)
                    .truncate(true)
                    .open(&p)
                    .map_err(|e| Error::io(&p, e))?,
            )
        }
        None => None,
    };

    let budget = cfg.reals_budget();
    let b = cfg.batch_size;
    let mut state = TrainState::default();
    let mut log = Vec::new();
    while state.reals_seen < budget {
        // Discriminator step.
        let real = sampler.next_batch(&dataset, b, &device, dtype)?;
        let real = augmenter.apply(&real, &mut aug_rng)?;
        let ws = sample_ws(&pair, b, cfg.style_mixing_prob, &mut latent_rng)?;
        let noise = NoiseBundle::random(pair.g_real.config(), b, &mut latent_rng, &device, dtype)?;
        let fake = pair.g_rendering.synthesize_frozen(&ws, &noise)?.detach();
        let fake = augmenter.apply(&fake, &mut aug_rng)?;
        let real_logits = discriminator.score(&real)?;
        let fake_logits = discriminator.score(&fake)?;
        augmenter.observe_real_logits(&real_logits, b)?;
        let d_main = (discriminator::softplus(&fake_logits)?.mean_all()?
            + discriminator::softplus(&real_logits.neg()?)?.mean_all()?)?;
        let mut d_total = d_main.clone();
        let mut r1 = 0.0;
        if cfg.r1_gamma > 0.0 && state.step % cfg.r1_interval.max(1) as u64 == 0 {
            let gamma = cfg.r1_gamma * cfg.r1_interval.max(1) as f64;
            let (surrogate, value) = discriminator::r1_surrogate(&discriminator, &real, gamma)?;
            d_total = (d_total + surrogate)?;
            r1 = value / cfg.r1_interval.max(1) as f64;
        }
        let d_grads = d_total.backward()?;
        d_opt.step(&d_grads)?;
        state.reals_seen += b as u64;
        let d_loss = scalar(&d_main)? + r1;

        // Generator step on a fresh z batch.
        let ws = sample_ws(&pair, b, cfg.style_mixing_prob, &mut latent_rng)?;
        let noise = NoiseBundle::random(pair.g_real.config(), b, &mut latent_rng, &device, dtype)?;
        let fake = pair.g_rendering.synthesize(&ws, &noise)?;
        let g_adv = discriminator::generator_adv_loss(&discriminator, &augmenter.apply(&fake, &mut aug_rng)?)?;
        let reference = pair.g_real.synthesize_frozen(&ws, &noise)?.detach();
        let terms = losses.terms_from_images(&reference, &fake)?;
        let (l_sketch, l_color) = (scalar(&terms.sketch)?, scalar(&terms.color)?);
        let objective = ((&g_adv + (&terms.sketch * losses_weights.lambda_sketch)?)?
            + (&terms.color * losses_weights.lambda_color)?)?;
        let mut g_grads = objective.backward()?;
        for v in &frozen_vars {
            g_grads.remove(v.as_tensor());
        }
        g_opt.step(&g_grads)?;

        let record = StepRecord {
            step: state.step,
            reals_seen: state.reals_seen,
            l_sketch,
            l_color,
            g_adv: scalar(&g_adv)?,
            d_loss,
        };
        if ![record.l_sketch, record.l_color, record.g_adv, record.d_loss]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite {
                step: state.step as usize,
                detail: format!("{record:?}"),
            });
        }
        if let Some(f) = metrics.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(f, "{line}").map_err(|e| Error::io(outputs.metrics_path().unwrap(), e))?;
        }
        log.push(record);
        state.step += 1;

        if pair.g_rendering.frozen_checksum()? != frozen_checksum {
            return Err(Error::Integrity(format!(
                "frozen parameters changed at step {}",
                state.step
            )));
        }
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every as u64 == 0 {
            if let Some(dir) = &outputs.dir {
                write_checkpoint(&pair, &discriminator, &mut state, dir, &frozen_checksum)?;
            }
        }
    }
    if let Some(dir) = &outputs.dir {
        write_checkpoint(&pair, &discriminator, &mut state, dir, &frozen_checksum)?;
    }
    log::info!(
        "fine-tuning finished after {} steps, {} reals",
        state.step,
        state.reals_seen
    );
    Ok(FinetuneOutcome {
        pair,
        discriminator,
        state,
        log,
    })
}

fn write_checkpoint(
    pair: &GeneratorPair,
    d: &Discriminator,
    state: &mut TrainState,
    dir: &Path,
    frozen_checksum: &str,
) -> Result<()> {
    if pair.g_rendering.frozen_checksum()? != frozen_checksum {
        return Err(Error::Integrity("frozen parameters drifted before checkpoint".into()));
    }
    pair.verify_invariants()?;
    let path = dir.join("pair.ckpt");
    pair.save(&path)?;
    d.save(dir.join("discriminator.ckpt"))?;
    state.last_checkpoint = Some(path);
    write_atomic(&dir.join("state.json"), serde_json::to_string_pretty(state)?.as_bytes())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Mean paired sketch L1 and blurred perceptual distance between the two
/// generators over `n` held-out latents.
pub fn paired_distances(pair: &GeneratorPair, losses: &IdentityLoss, n: usize, seed: u64) -> Result<(f64, f64)> {
    let mut r = rng::seeded(seed);
    let g = &pair.g_real;
    let (mut s_acc, mut c_acc) = (0.0, 0.0);
    let chunk = 8;
    let mut done = 0;
    while done < n {
        let k = chunk.min(n - done);
        let z = LatentZ::sample(&mut r, k, g.config().z_dim, g.device(), g.dtype())?;
        let ws = g.map_to_wplus(&z)?;
        let noise = NoiseBundle::random(g.config(), k, &mut r, g.device(), g.dtype())?;
        let a = pair.g_real.synthesize_frozen(&ws, &noise)?;
        let b = pair.g_rendering.synthesize_frozen(&ws, &noise)?;
        let t = losses.terms_from_images(&a, &b)?;
        s_acc += scalar(&t.sketch)? * k as f64;
        c_acc += scalar(&t.color)? * k as f64;
        done += k;
    }
    Ok((s_acc / n as f64, c_acc / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{clone_for_finetune, Generator, GeneratorConfig};
    use candle_core::Device;

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

    fn setup() -> (GeneratorPair, Discriminator, ImageDataset, IdentityLoss) {
        let dev = Device::Cpu;
        let g = Generator::new(small_cfg(), 1, &dev, DType::F32).unwrap();
        let ds = ImageDataset::stylized_toy(&g, 12, 5).unwrap();
        let pair = clone_for_finetune(&g).unwrap();
        let d = Discriminator::toy(16, 2, &dev, DType::F32).unwrap();
        let losses = IdentityLoss::toy(16, &dev, DType::F32).unwrap();
        (pair, d, ds, losses)
    }

    fn cfg() -> FinetuneConfig {
        FinetuneConfig {
            batch_size: 4,
            kimg_budget: 0.04,
            r1_interval: 4,
            seed: 7,
            ..FinetuneConfig::default()
        }
    }

    #[test]
    fn default_budget_is_40k_reals_with_flips() {
        assert_eq!(FinetuneConfig::default().kimg_budget, 40.0);
        assert_eq!(FinetuneConfig::default().reals_budget(), 40_000);
        assert!(FinetuneConfig::default().xflip);
    }

    #[test]
    fn run_accounts_reals_and_keeps_frozen_weights() {
        let (pair, d, ds, losses) = setup();
        let before = pair.g_rendering.frozen_checksum().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = finetune(pair, d, &ds, &losses, &cfg(), &RunOutputs::in_dir(dir.path())).unwrap();
        assert_eq!(out.state.reals_seen, 40);
        assert_eq!(out.state.step, 10);
        for (i, r) in out.log.iter().enumerate() {
            assert_eq!(r.reals_seen, (i as u64 + 1) * 4);
        }
        assert!(out.log[0].l_sketch.abs() <= 1e-6 && out.log[0].l_color.abs() <= 1e-6);
        assert!(out.log.last().unwrap().l_color > 0.0);
        assert_eq!(out.pair.g_rendering.frozen_checksum().unwrap(), before);
        out.pair.verify_invariants().unwrap();
        assert!(out.pair.shared_mapping());
        let logged = read_metrics(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(logged, out.log);
        assert!(dir.path().join("pair.ckpt").exists());
        let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert!(text.lines().next().unwrap().contains("\"L_sketch\""));
    }

    #[test]
    fn seeded_runs_reproduce_logs() {
        let run = || {
            let (pair, d, ds, losses) = setup();
            finetune(pair, d, &ds, &losses, &cfg(), &RunOutputs::none())
                .unwrap()
                .log
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            assert!((x.l_sketch - y.l_sketch).abs() <= 1e-6);
            assert!((x.l_color - y.l_color).abs() <= 1e-6);
            assert!((x.g_adv - y.g_adv).abs() <= 1e-6);
            assert!((x.d_loss - y.d_loss).abs() <= 1e-6);
        }
    }

    #[test]
    fn rejects_empty_dataset_and_bad_config() {
        let (pair, d, _, losses) = setup();
        assert!(finetune(
            pair.clone(),
            d.clone(),
            &ImageDataset::default(),
            &losses,
            &cfg(),
            &RunOutputs::none()
        )
        .is_err());
        let (_, _, ds, _) = setup();
        let bad = FinetuneConfig {
            kimg_budget: 0.0,
            ..cfg()
        };
        assert!(finetune(pair, d, &ds, &losses, &bad, &RunOutputs::none()).is_err());
    }

    #[test]
    fn style_mixing_changes_rows_after_crossover() {
        let (pair, ..) = setup();
        let mut r = rng::seeded(1);
        let ws = sample_ws(&pair, 2, 1.0, &mut r).unwrap();
        let rows = ws.tensor().to_dtype(DType::F64).unwrap().to_vec3::<f64>().unwrap();
        assert_ne!(rows[0][0], rows[0][rows[0].len() - 1]);
    }
}
