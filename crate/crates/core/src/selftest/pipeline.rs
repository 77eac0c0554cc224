//! End-to-end run on synthetic fixtures: align, fine-tune, realify,
//! composite, evaluate.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compositing::{composite_pipeline, FaceClass, FixtureParser, Placement, SegMask, SoftenConfig};
use crate::dataset::align::{
    canonical_pose, template_face, Pose, TEMPLATE_EYE_LEFT, TEMPLATE_EYE_RIGHT, TEMPLATE_MOUTH,
};
use crate::dataset::fetch::sha256_hex;
use crate::dataset::{
    align_manifest, apply_filterlist, dataset_stats, replay, AlignConfig, AuditLog, FaceLandmarks, Manifest,
    ManifestRecord, SidecarLandmarks, Split, Status,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    fid_between_dirs, identity_report, paired_dirs, reconstruction_metrics, MetricReport, MetricRow, ProjectionEmbedder,
};
use crate::finetune::{finetune, Discriminator, FinetuneConfig, ImageDataset, RunOutputs};
use crate::generators::{clone_for_finetune, Generator, GeneratorConfig, GeneratorPair, LatentWPlus, NoiseBundle};
use crate::imaging::{downsample, load_image, save_image, Image};
use crate::inference::{batch_realify, inputs_from_dir, DecodeNoise};
use crate::inversion::InversionConfig;
use crate::losses::{IdentityLoss, PerceptualNet};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    /// Synthetic raw faces; the last one is filtered out.
    pub faces: usize,
    pub align_size: usize,
    pub finetune_kimg: f64,
    pub inversion_steps: usize,
    pub seed: u64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            faces: 4,
            align_size: 1024,
            finetune_kimg: 0.25,
            inversion_steps: 200,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub seconds: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stages: Vec<StageReport>,
    pub seconds: f64,
    pub metrics: MetricReport,
}

fn check(cond: bool, stage: &str, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Integrity(format!("{stage}: {}", msg())))
    }
}

/// Ground-truth parsing of an aligned template face at `size`: skin, eyes
/// and lips.
pub fn template_segmentation(size: usize) -> Result<SegMask> {
    let pose = canonical_pose(size);
    let at = |r: usize, c: usize| -> [f64; 2] {
        let x = (c as f64 + 0.5 - pose.translate[0]) / pose.scale;
        let y = (r as f64 + 0.5 - pose.translate[1]) / pose.scale;
        [x, y]
    };
    let within = |p: [f64; 2], centre: [f64; 2], rx: f64, ry: f64| {
        ((p[0] - centre[0]) / rx).powi(2) + ((p[1] - centre[1]) / ry).powi(2) <= 1.0
    };
    let n = size * size;
    let (mut skin, mut eyes, mut lips) = (vec![false; n], vec![false; n], vec![false; n]);
    for r in 0..size {
        for c in 0..size {
            let p = at(r, c);
            let i = r * size + c;
            eyes[i] = within(p, TEMPLATE_EYE_LEFT, 0.1, 0.06) || within(p, TEMPLATE_EYE_RIGHT, 0.1, 0.06);
            lips[i] = within(p, TEMPLATE_MOUTH, 0.25, 0.1);
            skin[i] = within(p, [0.0, 0.05], 0.75, 1.0) && !eyes[i] && !lips[i];
        }
    }
    let mut seg = SegMask::empty(size, size);
    seg.insert(FaceClass::Skin, skin)?;
    seg.insert(FaceClass::Eyes, eyes)?;
    seg.insert(FaceClass::Lips, lips)?;
    Ok(seg)
}

fn toy_pair(seed: u64) -> Result<GeneratorPair> {
    clone_for_finetune(&Generator::new(GeneratorConfig::toy(), seed, &Device::Cpu, DType::F32)?)
}

/// Runs every stage in a fresh `dir` (existing contents are removed) and
/// returns per-stage timings. Any failed check aborts with an error naming
/// the stage.
pub fn run_pipeline(dir: &Path, opts: &PipelineOptions) -> Result<PipelineReport> {
    if opts.faces < 3 {
        return Err(Error::Config(
            "the pipeline needs at least 3 faces (one is filtered out)".into(),
        ));
    }
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let start = Instant::now();
    let mut report = PipelineReport::default();
    let stage = |name: &str, t: Instant, detail: String, report: &mut PipelineReport| {
        log::info!("selftest stage {name}: {detail}");
        report.stages.push(StageReport {
            name: name.into(),
            seconds: t.elapsed().as_secs_f64(),
            detail,
        });
    };
    let res = GeneratorConfig::toy().resolution;
    let raw_dir = dir.join("raw");
    let aligned_dir = dir.join("aligned");
    let inputs_dir = dir.join("inputs");
    std::fs::create_dir_all(&raw_dir).map_err(|e| Error::io(&raw_dir, e))?;
    std::fs::create_dir_all(&inputs_dir).map_err(|e| Error::io(&inputs_dir, e))?;

    // dataset-align
    let t = Instant::now();
    let mut r = rng::seeded(rng::derive_seed(opts.seed, 1));
    let mut records = Vec::new();
    for k in 0..opts.faces {
        let pose = Pose {
            scale: r.random_range(70.0..100.0),
            angle: r.random_range(-0.3..0.3),
            translate: [r.random_range(150.0..170.0), r.random_range(140.0..160.0)],
        };
        let (img, lm): (Image, FaceLandmarks) = template_face(320, 320, &pose);
        let path = raw_dir.join(format!("face{k}.png"));
        save_image(&img, &path)?;
        lm.save_json(SidecarLandmarks::path_for(&path))?;
        let mut rec = ManifestRecord::pending(
            format!("face{k}"),
            format!("https://example.org/raw/face{k}.png"),
            Split::Train,
        );
        rec.status = Status::Fetched;
        rec.content_hash = sha256_hex(&std::fs::read(&path).map_err(|e| Error::io(&path, e))?);
        rec.license_note = "synthetic".into();
        records.push(rec);
    }
    let initial = Manifest::new(records)?;
    let manifest_path = dir.join("manifest.csv");
    let mut manifest = initial.clone();
    let mut audit = AuditLog::beside(&manifest_path)?;
    let align_cfg = AlignConfig {
        output_size: opts.align_size,
        ..AlignConfig::default()
    };
    let outcomes = align_manifest(
        &mut manifest,
        Some(&manifest_path),
        &raw_dir,
        &aligned_dir,
        &SidecarLandmarks,
        &align_cfg,
        Some(&mut audit),
    )?;
    for o in &outcomes {
        if let Err(e) = &o.result {
            return Err(Error::Integrity(format!("dataset-align: {} failed: {e}", o.id)));
        }
    }
    let dropped = format!("face{}", opts.faces - 1);
    apply_filterlist(&mut manifest, std::slice::from_ref(&dropped), Some(&mut audit))?;
    manifest.save(&manifest_path)?;
    let counts = manifest.counts();
    check(
        counts.kept() + counts.filtered_out == counts.ever_fetched() && counts.filtered_out == 1,
        "dataset-align",
        || format!("counts do not reconcile: {counts:?}"),
    )?;
    check(replay(&initial, &audit.events()?)? == manifest, "dataset-align", || {
        "audit replay differs from the manifest".into()
    })?;
    let stats = dataset_stats(&aligned_dir)?;
    check(
        stats.count == opts.faces && stats.mean_resolution == Some((opts.align_size, opts.align_size)),
        "dataset-align",
        || {
            format!(
                "unexpected aligned set: {} images, {:?}",
                stats.count, stats.mean_resolution
            )
        },
    )?;
    stats.write(dir.join("stats"))?;
    for rec in manifest.records.iter().filter(|r| r.status == Status::Aligned) {
        let big = load_image(aligned_dir.join(format!("{}.png", rec.id)))?;
        let small = Image::from_tensor(&downsample(&big.to_tensor(&Device::Cpu, DType::F32)?, res)?)?;
        save_image(&small, inputs_dir.join(format!("{}.png", rec.id)))?;
    }
    stage(
        "dataset-align",
        t,
        format!(
            "{} aligned at {}px, {} kept",
            counts.ever_fetched(),
            opts.align_size,
            counts.kept()
        ),
        &mut report,
    );

    // finetune
    let t = Instant::now();
    let pair = toy_pair(rng::derive_seed(opts.seed, 2))?;
    let frozen = pair.g_rendering.frozen_checksum()?;
    let data = ImageDataset::load_dir(&inputs_dir)?;
    let d = Discriminator::toy(res, rng::derive_seed(opts.seed, 4), &Device::Cpu, DType::F32)?;
    let losses = IdentityLoss::toy(res, &Device::Cpu, DType::F32)?;
    let ft_cfg = FinetuneConfig {
        kimg_budget: opts.finetune_kimg,
        seed: opts.seed,
        ..FinetuneConfig::default()
    };
    let run_dir = dir.join("finetune");
    let outcome = finetune(pair, d, &data, &losses, &ft_cfg, &RunOutputs::in_dir(&run_dir))?;
    check(
        outcome.pair.g_rendering.frozen_checksum()? == frozen,
        "finetune",
        || "frozen parameters changed".into(),
    )?;
    let ckpt = outcome
        .state
        .last_checkpoint
        .clone()
        .ok_or_else(|| Error::Integrity("finetune: no checkpoint written".into()))?;
    let pair = GeneratorPair::load(&ckpt, &Device::Cpu, DType::F32)?;
    let last = outcome.log.last().map(|s| (s.l_sketch, s.l_color)).unwrap_or_default();
    stage(
        "finetune",
        t,
        format!(
            "{} steps on {} faces, last L_sketch {:.4} L_color {:.3e}",
            outcome.state.step,
            data.len(),
            last.0,
            last.1
        ),
        &mut report,
    );

    // realify
    let t = Instant::now();
    let perceptual = PerceptualNet::toy(0x5EED, &Device::Cpu, DType::F32)?;
    let inv_cfg = InversionConfig {
        steps: opts.inversion_steps,
        seed: opts.seed,
        ..InversionConfig::default()
    };
    let realified_dir = dir.join("realified");
    let inputs = inputs_from_dir(&inputs_dir)?;
    let batch = batch_realify(
        &pair,
        &inputs,
        &realified_dir,
        &perceptual,
        &inv_cfg,
        DecodeNoise::Fresh,
    )?;
    check(
        batch.failed() == 0 && batch.succeeded() == inputs.len(),
        "realify",
        || format!("{} of {} inputs failed", batch.failed(), inputs.len()),
    )?;
    for row in &batch.rows {
        let (a, b) = (
            row.initial_perceptual.unwrap_or(f64::NAN),
            row.final_perceptual.unwrap_or(f64::NAN),
        );
        check(b < a, "realify", || {
            format!("{}: perceptual distance did not decrease ({a} -> {b})", row.id)
        })?;
    }
    let mean_ratio = batch
        .rows
        .iter()
        .map(|r| r.final_perceptual.unwrap_or(f64::NAN) / r.initial_perceptual.unwrap_or(f64::NAN))
        .sum::<f64>()
        / batch.rows.len() as f64;
    stage(
        "realify",
        t,
        format!("{} images, mean final/initial {mean_ratio:.3}", batch.rows.len()),
        &mut report,
    );

    // composite
    let t = Instant::now();
    let mask_dir = dir.join("masks");
    template_segmentation(res)?.save_dir(&mask_dir)?;
    let parser = FixtureParser { dir: mask_dir };
    let classes = [FaceClass::Skin, FaceClass::Eyes, FaceClass::Lips];
    let composite_dir = dir.join("composited");
    std::fs::create_dir_all(&composite_dir).map_err(|e| Error::io(&composite_dir, e))?;
    for input in &inputs {
        let x = load_image(&input.path)?;
        let x_res = load_image(realified_dir.join(format!("{}.png", input.id)))?;
        let out = composite_pipeline(
            &x,
            &x_res,
            &parser,
            &classes,
            Placement::full(&x),
            &SoftenConfig::default(),
        )?;
        let untouched = (0..res * res)
            .filter(|&i| out.soft_mask.data()[i] == 0.0)
            .all(|i| (0..3).all(|c| out.image.plane(c)[i] == x.plane(c)[i]));
        check(untouched, "composite", || {
            format!("{}: pixels outside the mask changed", input.id)
        })?;
        save_image(&out.image, composite_dir.join(format!("{}.png", input.id)))?;
        out.soft_mask
            .save(composite_dir.join(format!("{}_mask.png", input.id)))?;
    }
    stage("composite", t, format!("{} composites", inputs.len()), &mut report);

    // evaluate
    let t = Instant::now();
    let recon_dir = dir.join("reconstructed");
    std::fs::create_dir_all(&recon_dir).map_err(|e| Error::io(&recon_dir, e))?;
    for input in &inputs {
        let ws = LatentWPlus::load(
            realified_dir.join(format!("{}.latent", input.id)),
            &Device::Cpu,
            DType::F32,
        )?;
        let noise = NoiseBundle::load(
            realified_dir.join(format!("{}.noise", input.id)),
            &Device::Cpu,
            DType::F32,
        )?;
        let img = Image::from_tensor(&pair.g_rendering.synthesize_frozen(&ws, &noise)?)?;
        save_image(&img, recon_dir.join(format!("{}.png", input.id)))?;
    }
    let embedder = ProjectionEmbedder::toy(0xE3BED, 64, &Device::Cpu)?;
    let recon = reconstruction_metrics(&paired_dirs(&inputs_dir, &recon_dir)?, &perceptual)?;
    let idsim = identity_report(&paired_dirs(&inputs_dir, &realified_dir)?, &embedder)?;
    let fid = fid_between_dirs(&inputs_dir, &realified_dir, &embedder, Some(&dir.join("stats_cache")))?;
    let mut metrics = MetricReport {
        fid: Some(fid),
        rows: recon
            .rows
            .iter()
            .zip(&idsim.rows)
            .map(|(a, b)| MetricRow {
                id: a.id.clone(),
                identity_similarity: b.identity_similarity,
                lpips: a.lpips,
                l2: a.l2,
            })
            .collect(),
        ..MetricReport::default()
    };
    metrics.reconcile();
    metrics.write_csv(&dir.join("report.csv"))?;
    let finite = [
        metrics.fid,
        metrics.identity_similarity_mean,
        metrics.lpips_mean,
        metrics.l2_mean,
    ]
    .iter()
    .all(|v| v.is_some_and(f64::is_finite));
    check(finite, "evaluate", || format!("non-finite metrics {metrics:?}"))?;
    stage(
        "evaluate",
        t,
        format!(
            "fid {:.4}, idsim {:.3}, lpips {:.4}, l2 {:.4}",
            fid,
            metrics.identity_similarity_mean.unwrap_or(f64::NAN),
            metrics.lpips_mean.unwrap_or(f64::NAN),
            metrics.l2_mean.unwrap_or(f64::NAN)
        ),
        &mut report,
    );
    report.metrics = metrics;
    report.seconds = start.elapsed().as_secs_f64();
    crate::tensor_file::write_atomic(&dir.join("selftest.json"), &serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

/// Default working directory for ad-hoc runs.
pub fn default_dir() -> PathBuf {
    std::env::temp_dir().join("uncanny-selftest")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segmentation_classes_are_disjoint_and_nonempty() {
        let seg = template_segmentation(64).unwrap();
        let (skin, eyes, lips) = (
            seg.raster(FaceClass::Skin).unwrap(),
            seg.raster(FaceClass::Eyes).unwrap(),
            seg.raster(FaceClass::Lips).unwrap(),
        );
        assert!(seg.area(FaceClass::Eyes) > 0 && seg.area(FaceClass::Lips) > 0 && seg.area(FaceClass::Skin) > 500);
        assert!((0..64 * 64).all(|i| [skin[i], eyes[i], lips[i]].iter().filter(|b| **b).count() <= 1));
    }
}
