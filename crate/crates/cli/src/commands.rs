//! One function per command, each a thin adapter over a library operation.

use std::path::{Path, PathBuf};

use serde_json::json;
use uncanny_core::compositing::{
    composite, composite_pipeline, parse_classes, paste_back, soften, ExternalParser, FaceParser, FixtureParser, Mask,
    PaletteParser, Placement,
};
use uncanny_core::dataset::align::raw_inputs;
use uncanny_core::dataset::{
    align_files, align_manifest, apply_filterlist, dataset_stats, fetch, read_filterlist, AuditLog, Manifest,
    SidecarLandmarks,
};
use uncanny_core::evaluation::{
    embedder_from_name, fid_between_dirs, identity_report, paired_dirs, reconstruction_metrics, MetricReport,
};
use uncanny_core::finetune::{finetune, Discriminator, ImageDataset, RunOutputs};
use uncanny_core::generators::{clone_for_finetune, Generator, GeneratorPair};
use uncanny_core::imaging::{load_image, save_image, Image};
use uncanny_core::inference::{batch_realify, inputs_from_dir};
use uncanny_core::inversion::invert;
use uncanny_core::losses::{IdentityLoss, PerceptualNet};
use uncanny_core::selftest::{self, SelftestOptions};
use uncanny_core::{rng, DType, Device};

use crate::config::{beside, Config, RESOLVED_NAME};
use crate::error::CliError;

type Outcome = Result<(), CliError>;

fn require(path: &Path) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        let e = std::io::Error::new(std::io::ErrorKind::NotFound, "input does not exist");
        Err(uncanny_core::Error::io(path, e).into())
    }
}

fn perceptual(cfg: &Config) -> Result<PerceptualNet, CliError> {
    let l = &cfg.losses;
    Ok(match l.perceptual_backend.as_str() {
        "toy" => PerceptualNet::toy(l.perceptual_seed, &Device::Cpu, DType::F32)?,
        "vgg16" => {
            let p = l.perceptual_weights.as_ref().ok_or_else(|| {
                CliError::Core(uncanny_core::Error::BackendUnavailable(
                    "vgg16 perceptual backend needs losses.perceptual_weights".into(),
                ))
            })?;
            PerceptualNet::load(p, &Device::Cpu, DType::F32)?
        }
        other => return Err(CliError::Config(format!("unknown losses.perceptual_backend {other:?}"))),
    })
}

fn load_pair(path: &Path) -> Result<GeneratorPair, CliError> {
    require(path)?;
    Ok(GeneratorPair::load(path, &Device::Cpu, DType::F32)?)
}

pub fn dataset_fetch(cfg: &Config, manifest_path: &Path, raw_dir: &Path) -> Outcome {
    require(manifest_path)?;
    let mut manifest = Manifest::load(manifest_path)?;
    let mut audit = AuditLog::beside(manifest_path)?;
    cfg.write(&beside(manifest_path))?;
    let summary = fetch(
        &mut manifest,
        Some(manifest_path),
        raw_dir,
        &cfg.fetch,
        cfg.workers(),
        Some(&mut audit),
    )?;
    log::info!(
        "fetch: {} downloaded, {} already present, {} reset, {} failed",
        summary.downloaded,
        summary.skipped,
        summary.reset,
        summary.failed
    );
    if summary.failed > 0 {
        return Err(CliError::Partial {
            message: format!(
                "{} downloads failed; see the error column of the manifest",
                summary.failed
            ),
            context: json!({"downloaded": summary.downloaded, "failed": summary.failed}),
        });
    }
    Ok(())
}

fn align_failures(outcomes: &[uncanny_core::dataset::align::AlignOutcome]) -> Outcome {
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| o.result.is_err())
        .map(|o| o.id.as_str())
        .collect();
    for o in outcomes {
        if let Err(e) = &o.result {
            log::warn!("align {}: {e}", o.id);
        }
    }
    log::info!("aligned {} of {} images", outcomes.len() - failed.len(), outcomes.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial {
            message: format!("{} of {} images could not be aligned", failed.len(), outcomes.len()),
            context: json!({"failed": failed}),
        })
    }
}

pub fn dataset_align(cfg: &Config, manifest_path: Option<&Path>, raw_dir: &Path, out: &Path) -> Outcome {
    require(raw_dir)?;
    match manifest_path {
        Some(m) => {
            require(m)?;
            let mut manifest = Manifest::load(m)?;
            let mut audit = AuditLog::beside(m)?;
            cfg.write(&beside(m))?;
            let outcomes = align_manifest(
                &mut manifest,
                Some(m),
                raw_dir,
                out,
                &SidecarLandmarks,
                &cfg.align,
                Some(&mut audit),
            )?;
            align_failures(&outcomes)
        }
        None => {
            cfg.write(&out.join(RESOLVED_NAME))?;
            let outcomes = align_files(&raw_inputs(raw_dir)?, out, &SidecarLandmarks, &cfg.align)?;
            align_failures(&outcomes)
        }
    }
}

pub fn dataset_filter(cfg: &Config, manifest_path: &Path, list: &Path) -> Outcome {
    require(manifest_path)?;
    require(list)?;
    let mut manifest = Manifest::load(manifest_path)?;
    let mut audit = AuditLog::beside(manifest_path)?;
    cfg.write(&beside(manifest_path))?;
    let ids = read_filterlist(list)?;
    let outcome = apply_filterlist(&mut manifest, &ids, Some(&mut audit))?;
    manifest.save(manifest_path)?;
    log::info!(
        "filter: {} marked, {} already filtered, {} not fetched, {} unknown",
        outcome.marked.len(),
        outcome.already_filtered.len(),
        outcome.not_fetched.len(),
        outcome.unknown.len()
    );
    for id in &outcome.unknown {
        log::warn!("filter list id {id:?} is not in the manifest");
    }
    Ok(())
}

pub fn dataset_stats_cmd(cfg: &Config, input: &Path, out: &Path) -> Outcome {
    require(input)?;
    let stats = dataset_stats(input)?;
    stats.write(out)?;
    cfg.write(&out.join(RESOLVED_NAME))?;
    log::info!(
        "stats: {} images, {} resolutions",
        stats.count,
        stats.resolution_histogram.len()
    );
    Ok(())
}

pub fn finetune_cmd(cfg: &Config, data: &Path, out: &Path, base: Option<&Path>) -> Outcome {
    require(data)?;
    let g_real = match base {
        Some(p) => {
            require(p)?;
            Generator::load(p, &Device::Cpu, DType::F32)?
        }
        None => {
            log::warn!(
                "no --base checkpoint; starting from a randomly initialized {} generator (seed {})",
                cfg.generator.preset,
                cfg.generator.seed
            );
            Generator::new(cfg.generator.config()?, cfg.generator.seed, &Device::Cpu, DType::F32)?
        }
    };
    let res = g_real.resolution();
    let dataset = ImageDataset::load_dir(data)?;
    let mut ft = cfg.finetune.clone();
    ft.loss_weights = cfg.losses.weights;
    let losses = IdentityLoss::from_config(&cfg.losses, res, &Device::Cpu, DType::F32)?;
    let d = Discriminator::toy(res, rng::derive_seed(ft.seed, 3), &Device::Cpu, DType::F32)?;
    cfg.write(&out.join(RESOLVED_NAME))?;
    let outcome = finetune(
        clone_for_finetune(&g_real)?,
        d,
        &dataset,
        &losses,
        &ft,
        &RunOutputs::in_dir(out),
    )?;
    log::info!(
        "fine-tuned for {} steps ({} reals); checkpoint {}",
        outcome.state.step,
        outcome.state.reals_seen,
        outcome
            .state
            .last_checkpoint
            .as_deref()
            .unwrap_or(Path::new("-"))
            .display()
    );
    Ok(())
}

pub fn invert_cmd(cfg: &Config, target: &Path, pair_path: &Path, out: &Path) -> Outcome {
    require(target)?;
    let pair = load_pair(pair_path)?;
    let x = load_image(target)?;
    let net = perceptual(cfg)?;
    cfg.write(&out.join(RESOLVED_NAME))?;
    let result = invert(&pair.g_rendering, &x, &net, &cfg.inversion)?;
    let stem = target
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "target".into());
    let saved = result.save(out, &stem)?;
    let recon = Image::from_tensor(
        &pair
            .g_rendering
            .synthesize_frozen(&result.wplus_star, &result.noise_star)?,
    )?;
    save_image(&recon.clamped(), out.join(format!("{stem}_inverted.png")))?;
    log::info!(
        "inverted {stem}: perceptual {:.4} -> {:.4}; latent {}",
        result.initial_perceptual(),
        result.final_perceptual,
        saved.latent.display()
    );
    Ok(())
}

pub fn realify_cmd(cfg: &Config, input: &Path, pair_path: &Path, out: &Path) -> Outcome {
    require(input)?;
    let pair = load_pair(pair_path)?;
    let inputs = inputs_from_dir(input)?;
    if inputs.is_empty() {
        return Err(CliError::MissingInput(format!("no PNG images in {}", input.display())));
    }
    let net = perceptual(cfg)?;
    cfg.write(&out.join(RESOLVED_NAME))?;
    let report = batch_realify(&pair, &inputs, out, &net, &cfg.inversion, cfg.realify.decode_noise)?;
    log::info!(
        "realified {} of {} images into {}",
        report.succeeded(),
        report.rows.len(),
        out.display()
    );
    if report.failed() > 0 {
        let failed: Vec<&str> = report
            .rows
            .iter()
            .filter(|r| r.status != "ok")
            .map(|r| r.id.as_str())
            .collect();
        return Err(CliError::Partial {
            message: format!(
                "{} of {} images failed; see summary.csv",
                failed.len(),
                report.rows.len()
            ),
            context: json!({"failed": failed}),
        });
    }
    Ok(())
}

/// `--placement top,left,height,width`; malformed values are usage errors.
pub fn parse_placement(s: &str) -> Result<Placement, CliError> {
    s.parse()
        .map_err(|e: uncanny_core::Error| CliError::Usage(e.to_string()))
}

pub struct CompositeArgs<'a> {
    pub original: &'a Path,
    pub generated: &'a Path,
    pub classes: &'a str,
    pub out: &'a Path,
    pub masks: Option<&'a Path>,
    pub mask: Option<&'a Path>,
    pub mask_out: Option<&'a Path>,
    pub placement: Option<Placement>,
}

pub fn composite_cmd(cfg: &Config, a: &CompositeArgs) -> Outcome {
    require(a.original)?;
    require(a.generated)?;
    let x = load_image(a.original)?;
    let x_res = load_image(a.generated)?;
    let placement = a.placement.unwrap_or_else(|| Placement::full(&x));
    let soften_cfg = &cfg.composite.soften;
    let (image, soft) = match a.mask {
        Some(m) => {
            require(m)?;
            let mask = Mask::load(m)?;
            let (pasted, placed) = paste_back(&x, &x_res, &mask, placement)?;
            let (radius, blur) = soften_cfg.resolve(x_res.height())?;
            let soft = soften(&placed, radius, &blur);
            (composite(&x, &pasted, &soft)?, soft)
        }
        None => {
            let classes = parse_classes(a.classes)?;
            let parser: Box<dyn FaceParser> = match (a.masks, cfg.composite.parser.as_str()) {
                (Some(dir), _) => {
                    require(dir)?;
                    Box::new(FixtureParser { dir: dir.to_path_buf() })
                }
                (None, "palette") => Box::new(PaletteParser {
                    tolerance: cfg.composite.palette_tolerance,
                }),
                (None, "external") => Box::new(ExternalParser {
                    command: cfg.composite.parser_command.clone(),
                }),
                (None, "fixture") => {
                    return Err(CliError::Usage(
                        "the fixture parser needs --masks DIR (or pass --mask)".into(),
                    ))
                }
                (None, other) => return Err(CliError::Config(format!("unknown composite.parser {other:?}"))),
            };
            let out = composite_pipeline(&x, &x_res, parser.as_ref(), &classes, placement, soften_cfg)?;
            (out.image, out.soft_mask)
        }
    };
    save_image(&image, a.out)?;
    if let Some(m) = a.mask_out {
        soft.save(m)?;
    }
    cfg.write(&beside(a.out))?;
    log::info!("composited into {}", a.out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Metric {
    Fid,
    Idsim,
    Recon,
}

pub fn evaluate_cmd(cfg: &Config, metric: Metric, set_a: &Path, set_b: &Path, out: &Path) -> Outcome {
    require(set_a)?;
    require(set_b)?;
    let ev = &cfg.evaluate;
    let report = match metric {
        Metric::Fid => {
            let embedder = embedder_from_name(&ev.backend, ev.embedder_weights.as_deref(), &Device::Cpu)?;
            let fid = fid_between_dirs(set_a, set_b, embedder.as_ref(), ev.cache_dir.as_deref())?;
            log::info!("FID {fid:.6} ({})", embedder.id());
            MetricReport {
                fid: Some(fid),
                ..MetricReport::default()
            }
        }
        Metric::Idsim => {
            let embedder = embedder_from_name(&ev.backend, ev.embedder_weights.as_deref(), &Device::Cpu)?;
            let r = identity_report(&paired_dirs(set_a, set_b)?, embedder.as_ref())?;
            log::info!(
                "identity similarity {:.6} over {} pairs",
                r.identity_similarity_mean.unwrap_or(f64::NAN),
                r.rows.len()
            );
            r
        }
        Metric::Recon => {
            let r = reconstruction_metrics(&paired_dirs(set_a, set_b)?, &perceptual(cfg)?)?;
            log::info!(
                "LPIPS {:.6}, L2 {:.6} over {} pairs",
                r.lpips_mean.unwrap_or(f64::NAN),
                r.l2_mean.unwrap_or(f64::NAN),
                r.rows.len()
            );
            r
        }
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| uncanny_core::Error::io(parent, e))?;
    }
    report.write_csv(out)?;
    cfg.write(&beside(out))?;
    Ok(())
}

pub fn selftest_cmd(work_dir: Option<PathBuf>, only: Vec<u8>) -> Outcome {
    let temp = tempfile::tempdir().map_err(|e| uncanny_core::Error::io(std::env::temp_dir(), e))?;
    let dir = work_dir.unwrap_or_else(|| temp.path().to_path_buf());
    let mut opts = SelftestOptions::new(&dir);
    opts.only = only;
    let results = selftest::run(opts, |r| println!("{r}"));
    let failed: Vec<u8> = results.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    println!(
        "selftest: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial {
            message: format!("criteria {failed:?} failed"),
            context: json!({"failed": failed}),
        })
    }
}
