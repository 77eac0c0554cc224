//! Rendering-to-realistic transfer: invert on the rendering-style generator,
//! then decode the recovered W+ code with the realistic generator.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{Generator, GeneratorPair, LatentWPlus, NoiseBundle};
use crate::imaging::{load_image, save_image, Image};
use crate::inversion::{invert, InversionConfig, InversionResult};
use crate::losses::perceptual::PerceptualNet;
use crate::rng;

/// Stream id separating the decode-noise draw from the inversion's own draw.
const DECODE_NOISE_STREAM: u64 = 0xDEC0DE;

/// Noise fed to the realistic generator at decode time. The optimized noise
/// is never reused.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeNoise {
    /// Unit Gaussian drawn from the inversion seed.
    #[default]
    Fresh,
    Zero,
}

#[derive(Debug, Clone)]
pub struct Realified {
    pub image: Image,
    pub decode_noise: NoiseBundle,
    pub inversion: InversionResult,
}

pub fn decode_noise(g: &Generator, mode: DecodeNoise, seed: u64) -> Result<NoiseBundle> {
    match mode {
        DecodeNoise::Fresh => {
            let mut r = rng::seeded(rng::derive_seed(seed, DECODE_NOISE_STREAM));
            NoiseBundle::random(g.config(), 1, &mut r, g.device(), g.dtype())
        }
        DecodeNoise::Zero => NoiseBundle::zeros(g.config(), 1, g.device(), g.dtype()),
    }
}

/// Renders `ws` with `g_real` exactly as given.
pub fn decode(g_real: &Generator, ws: &LatentWPlus, noise: &NoiseBundle) -> Result<Image> {
    Image::from_tensor(&g_real.synthesize_frozen(ws, noise)?)
}

pub fn realify(
    pair: &GeneratorPair,
    x: &Image,
    perceptual: &PerceptualNet,
    cfg: &InversionConfig,
    mode: DecodeNoise,
) -> Result<Realified> {
    let inversion = invert(&pair.g_rendering, x, perceptual, cfg)?;
    let noise = decode_noise(&pair.g_real, mode, cfg.seed)?;
    Ok(Realified {
        image: decode(&pair.g_real, &inversion.wplus_star, &noise)?,
        decode_noise: noise,
        inversion,
    })
}

/// Reference pipeline without the rendering-style clone: invert directly on
/// `g_real` and decode with the same generator.
pub fn naive_realify(
    g_real: &Generator,
    x: &Image,
    perceptual: &PerceptualNet,
    cfg: &InversionConfig,
    mode: DecodeNoise,
) -> Result<Realified> {
    let inversion = invert(g_real, x, perceptual, cfg)?;
    let noise = decode_noise(g_real, mode, cfg.seed)?;
    Ok(Realified {
        image: decode(g_real, &inversion.wplus_star, &noise)?,
        decode_noise: noise,
        inversion,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchInput {
    pub id: String,
    pub path: PathBuf,
}

/// Every `*.png` in `dir`, sorted, keyed by file stem.
pub fn inputs_from_dir(dir: impl AsRef<Path>) -> Result<Vec<BatchInput>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    Ok(paths
        .into_iter()
        .map(|path| BatchInput {
            id: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            path,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    pub input: String,
    pub status: String,
    pub output: String,
    pub latent: String,
    pub initial_perceptual: Option<f64>,
    pub final_perceptual: Option<f64>,
    pub wall_time_s: f64,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchReport {
    pub rows: Vec<ReportRow>,
}

impl BatchReport {
    pub fn succeeded(&self) -> usize {
        self.rows.iter().filter(|r| r.status == "ok").count()
    }

    pub fn failed(&self) -> usize {
        self.rows.len() - self.succeeded()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(Self {
            rows: r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?,
        })
    }
}

/// Realifies every input into `out_dir` (`{id}.png`, `{id}.latent`,
/// `{id}.noise`, `{id}_trace.csv`) and writes `summary.csv`. A failing item
/// is recorded and the rest still run.
pub fn batch_realify(
    pair: &GeneratorPair,
    inputs: &[BatchInput],
    out_dir: impl AsRef<Path>,
    perceptual: &PerceptualNet,
    cfg: &InversionConfig,
    mode: DecodeNoise,
) -> Result<BatchReport> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows = inputs
        .par_iter()
        .map(|item| {
            let start = Instant::now();
            let outcome = (|| -> Result<(PathBuf, PathBuf, InversionResult)> {
                let x = load_image(&item.path)?;
                let r = realify(pair, &x, perceptual, cfg, mode)?;
                let saved = r.inversion.save(out_dir, &item.id)?;
                let output = out_dir.join(format!("{}.png", item.id));
                save_image(&r.image, &output)?;
                Ok((output, saved.latent, r.inversion))
            })();
            let wall_time_s = start.elapsed().as_secs_f64();
            let input = item.path.display().to_string();
            match outcome {
                Ok((output, latent, inv)) => {
                    log::info!("realified {} in {wall_time_s:.1}s", item.id);
                    ReportRow {
                        id: item.id.clone(),
                        input,
                        status: "ok".into(),
                        output: output.display().to_string(),
                        latent: latent.display().to_string(),
                        initial_perceptual: Some(inv.initial_perceptual()),
                        final_perceptual: Some(inv.final_perceptual),
                        wall_time_s,
                        error: String::new(),
                    }
                }
                Err(e) => {
                    log::warn!("realify failed for {}: {e}", item.id);
                    ReportRow {
                        id: item.id.clone(),
                        input,
                        status: "failed".into(),
                        output: String::new(),
                        latent: String::new(),
                        initial_perceptual: None,
                        final_perceptual: None,
                        wall_time_s,
                        error: e.to_string(),
                    }
                }
            }
        })
        .collect();
    let report = BatchReport { rows };
    report.write_csv(&out_dir.join("summary.csv"))?;
    Ok(report)
}
