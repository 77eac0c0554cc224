//! Toy-scale acceptance checks shared by the `acceptance` test target and the
//! `selftest` command. Each criterion returns a pass/fail verdict with a short
//! detail line; a panic inside one counts as its failure.

pub mod pipeline;

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use crate::compositing::{composite, Mask};
use crate::error::Error;
use crate::evaluation::{frechet_distance, FeatureStats};
use crate::finetune::{
    finetune, paired_distances, read_metrics, Discriminator, FinetuneConfig, FinetuneOutcome, ImageDataset, RunOutputs,
};
use crate::generators::{
    clone_for_finetune, Generator, GeneratorConfig, GeneratorPair, LatentWPlus, LatentZ, NoiseBundle,
};
use crate::imaging::{gaussian_blur, load_image, save_image, BlurSpec, Image};
use crate::inversion::{invert_joint, InversionConfig};
use crate::losses::{IdentityLoss, LossWeights, PerceptualNet};
use crate::rng;

pub use pipeline::{run_pipeline, PipelineOptions, PipelineReport, StageReport};

pub const CRITERIA: [(u8, &str); 10] = [
    (1, "clone-zero"),
    (2, "freeze-integrity"),
    (3, "loss-gradient"),
    (4, "ablation-direction"),
    (5, "inversion-convergence"),
    (6, "fid-oracle"),
    (7, "compositing-algebra"),
    (8, "blur-contracts"),
    (9, "determinism-round-trips"),
    (10, "end-to-end"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {:>2} {}: {} ({}; {:.1}s)",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail,
            self.seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct SelftestOptions {
    pub work_dir: PathBuf,
    /// Criteria to run; empty runs all of them.
    pub only: Vec<u8>,
    pub seed: u64,
    pub pipeline: PipelineOptions,
}

impl SelftestOptions {
    pub fn new(work_dir: impl Into<PathBuf>) -> Self {
        Self {
            work_dir: work_dir.into(),
            only: Vec::new(),
            seed: 7,
            pipeline: PipelineOptions::default(),
        }
    }
}

/// Failure message of a criterion.
struct Failure(String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        // Backend errors may carry a multi-line backtrace; keep the headline.
        let msg = e.to_string();
        Failure(format!(
            "error [{}]: {}",
            e.code(),
            msg.lines().next().unwrap_or_default()
        ))
    }
}

impl From<candle_core::Error> for Failure {
    fn from(e: candle_core::Error) -> Self {
        Failure::from(Error::from(e))
    }
}

type Check = std::result::Result<String, Failure>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        let ok: bool = $cond;
        if !ok {
            return Err(Failure(format!($($arg)*)));
        }
    };
}

const RES: usize = 64;

struct Ablation {
    with: FinetuneOutcome,
    without: FinetuneOutcome,
    g_real: Generator,
    mapping_before: String,
    torgb_before: String,
    seconds: f64,
}

struct Context {
    opts: SelftestOptions,
    ablation: Option<std::result::Result<Ablation, String>>,
}

fn toy_generator(seed: u64, dtype: DType) -> crate::Result<Generator> {
    Generator::new(GeneratorConfig::toy(), seed, &Device::Cpu, dtype)
}

fn sample_latents(g: &Generator, n: usize, seed: u64) -> crate::Result<(LatentWPlus, NoiseBundle)> {
    let mut r = rng::seeded(seed);
    let z = LatentZ::sample(&mut r, n, g.config().z_dim, g.device(), g.dtype())?;
    let ws = g.map_to_wplus(&z)?.detach();
    let noise = NoiseBundle::random(g.config(), n, &mut r, g.device(), g.dtype())?;
    Ok((ws, noise))
}

fn mapping_and_torgb(g: &Generator) -> crate::Result<(String, String)> {
    let (m, t) = (g.mapping_parameter_names(), g.torgb_parameter_names());
    Ok((
        g.params().checksum(m.iter().map(String::as_str))?,
        g.params().checksum(t.iter().map(String::as_str))?,
    ))
}

impl Context {
    /// The WITH and lambda = 0 fine-tuning runs, computed once.
    fn ablation(&mut self) -> std::result::Result<&Ablation, Failure> {
        if self.ablation.is_none() {
            let run = (|| -> crate::Result<Ablation> {
                let t = Instant::now();
                let seed = self.opts.seed;
                let g_real = toy_generator(rng::derive_seed(seed, 1), DType::F32)?;
                let data = ImageDataset::stylized_toy(&g_real, 256, rng::derive_seed(seed, 2))?;
                let losses = IdentityLoss::toy(RES, &Device::Cpu, DType::F32)?;
                let cfg = FinetuneConfig {
                    kimg_budget: 2.0,
                    seed,
                    ..FinetuneConfig::default()
                };
                let start_pair = clone_for_finetune(&g_real)?;
                let (mapping_before, torgb_before) = mapping_and_torgb(&start_pair.g_rendering)?;
                let mut outcomes = Vec::new();
                for (name, weights) in [("with", cfg.loss_weights), ("without", LossWeights::ZERO)] {
                    let pair = clone_for_finetune(&g_real)?;
                    let d = Discriminator::toy(RES, rng::derive_seed(seed, 3), &Device::Cpu, DType::F32)?;
                    let run_cfg = FinetuneConfig {
                        loss_weights: weights,
                        ..cfg.clone()
                    };
                    let out = RunOutputs::in_dir(self.opts.work_dir.join(format!("ablation_{name}")));
                    outcomes.push(finetune(pair, d, &data, &losses, &run_cfg, &out)?);
                }
                let without = outcomes.pop().unwrap();
                let with = outcomes.pop().unwrap();
                Ok(Ablation {
                    with,
                    without,
                    g_real,
                    mapping_before,
                    torgb_before,
                    seconds: t.elapsed().as_secs_f64(),
                })
            })();
            self.ablation = Some(run.map_err(|e| format!("ablation runs failed [{}]: {e}", e.code())));
        }
        match self.ablation.as_ref().unwrap() {
            Ok(a) => Ok(a),
            Err(e) => Err(Failure(e.clone())),
        }
    }
}

fn clone_zero(_: &mut Context) -> Check {
    let t = Instant::now();
    let g = toy_generator(11, DType::F32)?;
    let pair = clone_for_finetune(&g)?;
    let losses = IdentityLoss::toy(RES, &Device::Cpu, DType::F32)?;
    let (ws, noise) = sample_latents(&g, 10, 12)?;
    let (sketch, color, _) = losses.terms(&pair, &ws, &noise)?.values()?;
    let secs = t.elapsed().as_secs_f64();
    ensure!(
        sketch.abs() <= 1e-6 && color.abs() <= 1e-6,
        "L_sketch {sketch:e}, L_color {color:e} exceed 1e-6"
    );
    ensure!(secs < 60.0, "took {secs:.1}s, limit 60s");
    Ok(format!("L_sketch {sketch:e}, L_color {color:e} on 10 w+"))
}

fn freeze_integrity(ctx: &mut Context) -> Check {
    let seed = ctx.opts.seed;
    let a = ctx.ablation()?;
    let (mapping, torgb) = mapping_and_torgb(&a.with.pair.g_rendering)?;
    ensure!(
        mapping == a.mapping_before,
        "mapping checksum changed: {} -> {mapping}",
        a.mapping_before
    );
    ensure!(
        torgb == a.torgb_before,
        "ToRGB checksum changed: {} -> {torgb}",
        a.torgb_before
    );
    let pair = &a.with.pair;
    let mut r = rng::seeded(rng::derive_seed(seed, 20));
    let z = LatentZ::sample(&mut r, 100, a.g_real.config().z_dim, &Device::Cpu, DType::F32)?;
    let (w_real, w_rendering) = (pair.g_real.map_to_wplus(&z)?, pair.g_rendering.map_to_wplus(&z)?);
    ensure!(
        w_real.bit_eq(&w_rendering)?,
        "map_to_wplus differs between the two generators"
    );
    Ok(format!(
        "{} steps, checksums {}.. / {}.., 100 z shared",
        a.with.state.step,
        &mapping[..12],
        &torgb[..12]
    ))
}

fn flat(t: &Tensor) -> crate::Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

fn set_scalar(var: &Var, index: usize, value: f64) -> crate::Result<()> {
    let mut v = flat(var.as_tensor())?;
    v[index] = value;
    var.set(&Tensor::from_vec(v, var.shape(), var.device())?.to_dtype(var.dtype())?)?;
    Ok(())
}

fn loss_gradient(ctx: &mut Context) -> Check {
    let seed = rng::derive_seed(ctx.opts.seed, 30);
    let g = toy_generator(seed, DType::F64)?;
    let pair = clone_for_finetune(&g)?;
    let vars = pair.g_rendering.trainable_vars();
    let mut r = rng::seeded(seed);
    // Move away from the clone point, where the loss sits at its minimum.
    for (_, v) in &vars {
        let n = rng::normal_tensor(&mut r, v.shape(), v.device(), DType::F64)?;
        v.set(&(v.as_tensor() + (n * 0.05)?)?)?;
    }
    let losses = IdentityLoss::toy(RES, &Device::Cpu, DType::F64)?;
    let (ws, noise) = sample_latents(&g, 2, rng::derive_seed(seed, 1))?;
    let loss = |pair: &GeneratorPair| -> crate::Result<f64> {
        Ok(losses.identity_loss(pair, &ws, &noise)?.to_scalar::<f64>()?)
    };
    let grads = losses.identity_loss(&pair, &ws, &noise)?.backward()?;
    let sizes: Vec<usize> = vars.iter().map(|(_, v)| v.elem_count()).collect();
    let total: usize = sizes.iter().sum();
    let h = 1e-3;
    let mut worst = 0.0f64;
    let mut picked = Vec::new();
    for _ in 0..5 {
        let mut k = r.random_range(0..total);
        let vi = sizes
            .iter()
            .position(|&s| {
                if k < s {
                    true
                } else {
                    k -= s;
                    false
                }
            })
            .unwrap();
        let (name, var) = &vars[vi];
        let analytic = match grads.get(var.as_tensor()) {
            Some(gr) => flat(gr)?[k],
            None => 0.0,
        };
        let x0 = flat(var.as_tensor())?[k];
        set_scalar(var, k, x0 + h)?;
        let plus = loss(&pair)?;
        set_scalar(var, k, x0 - h)?;
        let minus = loss(&pair)?;
        set_scalar(var, k, x0)?;
        let numeric = (plus - minus) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale == 0.0 {
            0.0
        } else {
            (analytic - numeric).abs() / scale
        };
        worst = worst.max(rel);
        picked.push(format!("{name}[{k}] {analytic:.4e} vs {numeric:.4e}"));
        ensure!(
            rel <= 1e-2,
            "{name}[{k}]: analytic {analytic:e}, finite difference {numeric:e}, relative error {rel:e}"
        );
    }
    Ok(format!("worst relative error {worst:.2e} over {}", picked.join(", ")))
}

fn ablation_direction(ctx: &mut Context) -> Check {
    let t = Instant::now();
    let held_out = rng::derive_seed(ctx.opts.seed, 40);
    let a = ctx.ablation()?;
    let losses = IdentityLoss::toy(RES, &Device::Cpu, DType::F32)?;
    let (s_with, c_with) = paired_distances(&a.with.pair, &losses, 32, held_out)?;
    let (s_without, c_without) = paired_distances(&a.without.pair, &losses, 32, held_out)?;
    let secs = a.seconds + t.elapsed().as_secs_f64();
    let detail = format!("sketch {s_with:.4} vs {s_without:.4}, color {c_with:.4e} vs {c_without:.4e}");
    ensure!(
        s_with < s_without && c_with < c_without,
        "identity loss did not help: {detail}"
    );
    ensure!(secs <= 1800.0, "took {secs:.0}s, limit 1800s");
    Ok(format!("{detail}, both runs {secs:.0}s"))
}

fn inversion_convergence(ctx: &mut Context) -> Check {
    let seed = rng::derive_seed(ctx.opts.seed, 50);
    let a = ctx.ablation()?;
    let g = &a.with.pair.g_rendering;
    let before = g.weights_checksum()?;
    let (ws, noise) = sample_latents(g, 10, seed)?;
    let targets = Image::batch_from_tensor(&g.synthesize_frozen(&ws, &noise)?)?;
    let perceptual = PerceptualNet::toy(0x5EED, &Device::Cpu, DType::F32)?;
    let cfg = InversionConfig {
        seed,
        ..InversionConfig::default()
    };
    ensure!(
        cfg.steps == 500 && cfg.lambda_noise == 1e5,
        "unexpected inversion defaults {cfg:?}"
    );
    let results = invert_joint(g, &targets, &perceptual, &cfg)?;
    ensure!(
        g.weights_checksum()? == before,
        "generator weights changed during inversion"
    );
    let mut worst = 0.0f64;
    for (i, res) in results.iter().enumerate() {
        let finite = res
            .loss_trace
            .iter()
            .all(|p| p.total.is_finite() && p.perceptual.is_finite() && p.noise_reg.is_finite());
        ensure!(
            finite && res.final_perceptual.is_finite(),
            "image {i}: non-finite loss trace"
        );
        let ratio = res.final_perceptual / res.initial_perceptual();
        worst = worst.max(ratio);
        ensure!(
            ratio <= 0.3,
            "image {i}: final {:.4} > 0.3 x initial {:.4}",
            res.final_perceptual,
            res.initial_perceptual()
        );
    }
    Ok(format!("worst final/initial {worst:.3} over 10 images"))
}

fn fid_oracle(ctx: &mut Context) -> Check {
    let diag = |mean: &[f64], var: &[f64]| FeatureStats {
        mean: mean.to_vec(),
        covariance: (0..4).map(|k| if k % 3 == 0 { var[k / 3] } else { 0.0 }).collect(),
        n: 2,
        backend: "hand".into(),
    };
    let (mu1, var1, mu2, var2): ([f64; 2], [f64; 2], [f64; 2], [f64; 2]) =
        ([0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [4.0, 4.0]);
    let oracle: f64 = (0..2)
        .map(|i| (mu1[i] - mu2[i]).powi(2) + (f64::sqrt(var1[i]) - f64::sqrt(var2[i])).powi(2))
        .sum();
    let d = frechet_distance(&diag(&mu1, &var1), &diag(&mu2, &var2))?;
    ensure!((d - oracle).abs() <= 1e-6, "diagonal case {d} vs closed form {oracle}");
    let mut r = rng::seeded(rng::derive_seed(ctx.opts.seed, 60));
    let features: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..32).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let s = FeatureStats::from_features(&features, "uniform")?;
    let self_d = frechet_distance(&s, &s)?;
    ensure!(self_d.abs() <= 1e-8, "self distance {self_d:e}");
    Ok(format!("diagonal {d:.9} (closed form {oracle}), self {self_d:.2e}"))
}

fn compositing_algebra(ctx: &mut Context) -> Check {
    let mut r = rng::seeded(rng::derive_seed(ctx.opts.seed, 70));
    let mut random = |h: usize, w: usize| Image::from_fn(h, w, |_, _, _| r.random_range(-1.0f32..=1.0));
    let (x, x_res) = (random(16, 16), random(16, 16));
    ensure!(
        composite(&x, &x_res, &Mask::filled(16, 16, 1.0))? == x_res,
        "mask 1 is not the generated image"
    );
    ensure!(
        composite(&x, &x_res, &Mask::filled(16, 16, 0.0))? == x,
        "mask 0 is not the original image"
    );
    let half = composite(&x, &x_res, &Mask::filled(16, 16, 0.5))?;
    let mid = half
        .data()
        .iter()
        .zip(x.data().iter().zip(x_res.data()))
        .map(|(o, (a, b))| (*o as f64 - 0.5 * (*a as f64 + *b as f64)).abs())
        .fold(0.0, f64::max);
    ensure!(mid <= 1e-7, "mask 0.5 is {mid:e} from the midpoint");
    // 1000 random (x, x_res, m) triples, one per pixel.
    let (a, b) = (random(1, 1000), random(1, 1000));
    let m = Mask::from_fn(1, 1000, |_, _| r.random_range(0.0f32..=1.0));
    let out = composite(&a, &b, &m)?;
    let convex = (0..3 * 1000).all(|i| {
        let (lo, hi) = (a.data()[i].min(b.data()[i]), a.data()[i].max(b.data()[i]));
        (lo..=hi).contains(&out.data()[i])
    });
    ensure!(convex, "a blended pixel left the interval of its sources");
    Ok(format!(
        "endpoints exact, midpoint error {mid:.1e}, 1000 triples convex"
    ))
}

fn blur_contracts(_: &mut Context) -> Check {
    let spec = BlurSpec::new(13, 10.0)?;
    let w = spec.weights();
    let sum: f64 = w.iter().sum();
    ensure!((sum - 1.0).abs() <= 1e-6, "weights sum to {sum}");
    let raw: Vec<f64> = (0..13).map(|i| (-((i as f64 - 6.0).powi(2)) / 200.0).exp()).collect();
    let norm: f64 = raw.iter().sum();
    let n = 25;
    let mut impulse = vec![0f32; n * n];
    impulse[12 * n + 12] = 1.0;
    let out = flat(&gaussian_blur(
        &Tensor::from_vec(impulse, (1, 1, n, n), &Device::Cpu)?,
        &spec,
    )?)?;
    let mut err = 0.0f64;
    for r in 0..n {
        for c in 0..n {
            let (dy, dx) = (r as isize - 12, c as isize - 12);
            let want = if dy.abs() <= 6 && dx.abs() <= 6 {
                raw[(dy + 6) as usize] * raw[(dx + 6) as usize] / (norm * norm)
            } else {
                0.0
            };
            err = err.max((out[r * n + c] - want).abs());
        }
    }
    ensure!(err <= 1e-6, "impulse response off by {err:e}");
    let constant = Tensor::full(0.37f32, (1, 3, 20, 20), &Device::Cpu)?;
    let cerr = flat(&gaussian_blur(&constant, &spec)?)?
        .iter()
        .map(|v| (v - 0.37f32 as f64).abs())
        .fold(0.0, f64::max);
    ensure!(cerr <= 1e-6, "constant image changed by {cerr:e}");
    Ok(format!(
        "sum error {:.1e}, impulse error {err:.1e}, constant error {cerr:.1e}",
        (sum - 1.0).abs()
    ))
}

fn determinism(ctx: &mut Context) -> Check {
    let dir = ctx.opts.work_dir.join("determinism");
    let seed = rng::derive_seed(ctx.opts.seed, 90);
    let g_real = toy_generator(seed, DType::F32)?;
    let data = ImageDataset::stylized_toy(&g_real, 32, rng::derive_seed(seed, 1))?;
    let losses = IdentityLoss::toy(RES, &Device::Cpu, DType::F32)?;
    let cfg = FinetuneConfig {
        kimg_budget: 0.064,
        seed,
        ..FinetuneConfig::default()
    };
    let mut runs = Vec::new();
    for k in 0..2 {
        let d = Discriminator::toy(RES, rng::derive_seed(seed, 2), &Device::Cpu, DType::F32)?;
        runs.push(finetune(
            clone_for_finetune(&g_real)?,
            d,
            &data,
            &losses,
            &cfg,
            &RunOutputs::in_dir(dir.join(format!("run{k}"))),
        )?);
    }
    let from_disk = read_metrics(dir.join("run0").join("metrics.jsonl"))?;
    let fields = |s: &crate::finetune::StepRecord| {
        [
            s.l_sketch,
            s.l_color,
            s.g_adv,
            s.d_loss,
            s.step as f64,
            s.reals_seen as f64,
        ]
    };
    let mut drift = 0.0f64;
    ensure!(
        runs[0].log.len() == runs[1].log.len() && runs[0].log.len() == from_disk.len(),
        "log lengths differ"
    );
    for ((a, b), c) in runs[0].log.iter().zip(&runs[1].log).zip(&from_disk) {
        for ((x, y), z) in fields(a).iter().zip(fields(b)).zip(fields(c)) {
            drift = drift.max((x - y).abs()).max((x - z).abs());
        }
    }
    ensure!(drift <= 1e-6, "seeded runs differ by {drift:e}");

    let pair = &runs[0].pair;
    let (ws, noise) = sample_latents(&pair.g_real, 1, rng::derive_seed(seed, 3))?;
    let ckpt = runs[0]
        .state
        .last_checkpoint
        .clone()
        .ok_or_else(|| Failure("no checkpoint written".into()))?;
    let loaded = GeneratorPair::load(&ckpt, &Device::Cpu, DType::F32)?;
    ws.save(dir.join("w.latent"))?;
    noise.save(dir.join("w.noise"))?;
    let ws2 = LatentWPlus::load(dir.join("w.latent"), &Device::Cpu, DType::F32)?;
    let noise2 = NoiseBundle::load(dir.join("w.noise"), &Device::Cpu, DType::F32)?;
    for (which, a, b) in [
        ("g_real", &pair.g_real, &loaded.g_real),
        ("g_rendering", &pair.g_rendering, &loaded.g_rendering),
    ] {
        let want = flat(&a.synthesize_frozen(&ws, &noise)?)?;
        ensure!(
            flat(&b.synthesize_frozen(&ws, &noise)?)? == want,
            "{which} differs after the checkpoint round trip"
        );
        ensure!(
            flat(&a.synthesize_frozen(&ws2, &noise2)?)? == want,
            "{which} differs after the latent round trip"
        );
    }

    let mut r = rng::seeded(rng::derive_seed(seed, 4));
    let img = Image::from_fn(32, 40, |_, _, _| r.random_range(-1.0f32..=1.0));
    let png = dir.join("round_trip.png");
    save_image(&img, &png)?;
    let err = img.max_abs_diff(&load_image(&png)?) as f64;
    ensure!(err <= 2.0 / 255.0, "PNG round trip error {err}");
    Ok(format!(
        "{} logged steps reproduce (max drift {drift:.1e}), synthesis bit-identical, PNG error {err:.4}",
        from_disk.len()
    ))
}

fn end_to_end(ctx: &mut Context) -> Check {
    let report = run_pipeline(&ctx.opts.work_dir.join("pipeline"), &ctx.opts.pipeline)?;
    ensure!(
        report.seconds <= 1200.0,
        "pipeline took {:.0}s, limit 1200s",
        report.seconds
    );
    let stages: Vec<String> = report
        .stages
        .iter()
        .map(|s| format!("{} {:.0}s", s.name, s.seconds))
        .collect();
    Ok(stages.join(", "))
}

type CriterionFn = fn(&mut Context) -> Check;

const CHECKS: [CriterionFn; 10] = [
    clone_zero,
    freeze_integrity,
    loss_gradient,
    ablation_direction,
    inversion_convergence,
    fid_oracle,
    compositing_algebra,
    blur_contracts,
    determinism,
    end_to_end,
];

/// Runs the selected criteria in order, reporting each result as it finishes.
pub fn run(opts: SelftestOptions, mut on_result: impl FnMut(&CriterionResult)) -> Vec<CriterionResult> {
    let mut ctx = Context { opts, ablation: None };
    let mut results = Vec::new();
    for ((id, name), check) in CRITERIA.iter().zip(CHECKS) {
        if !ctx.opts.only.is_empty() && !ctx.opts.only.contains(id) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&mut ctx))).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(Failure(format!("panicked: {msg}")))
        });
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(Failure(d)) => (false, d),
        };
        let result = CriterionResult {
            id: *id,
            name,
            passed,
            detail,
            seconds: t.elapsed().as_secs_f64(),
        };
        on_result(&result);
        results.push(result);
    }
    results
}
