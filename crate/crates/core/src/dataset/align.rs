//! Landmark-based face alignment in the FFHQ convention.
//!
//! Coordinates are continuous pixel coordinates `(x, y)`: pixel `(row, col)`
//! covers `[col, col + 1) x [row, row + 1)`, so its centre is at
//! `(col + 0.5, row + 0.5)`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{AuditLog, Manifest, Status};
use crate::error::{Error, Result};
use crate::imaging::{bilinear_clamped, load_raw_image, reflect_index, save_image, Image};

pub type Point = [f64; 2];

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

fn scale(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s]
}

fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn mean(points: &[Point]) -> Point {
    let n = points.len() as f64;
    let s = points.iter().fold([0.0, 0.0], |acc, p| add(acc, *p));
    scale(s, 1.0 / n)
}

/// Supported point layouts.
///
/// `Ibug68`: the 68-point iBUG order (jaw 0-16, brows 17-26, nose 27-35,
/// image-left eye 36-41, image-right eye 42-47, outer lip 48-59 with the
/// corners at 48 and 54, inner lip 60-67).
/// `Five`: image-left eye centre, image-right eye centre, nose tip,
/// image-left mouth corner, image-right mouth corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkConvention {
    Ibug68,
    Five,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceLandmarks {
    pub points: Vec<Point>,
}

/// The four points the alignment depends on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchors {
    pub eye_left: Point,
    pub eye_right: Point,
    pub mouth_left: Point,
    pub mouth_right: Point,
}

impl FaceLandmarks {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() != 68 && points.len() != 5 {
            return Err(Error::InvalidArgument(format!(
                "expected 68 or 5 landmarks, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite landmark".into()));
        }
        Ok(Self { points })
    }

    pub fn convention(&self) -> LandmarkConvention {
        if self.points.len() == 68 {
            LandmarkConvention::Ibug68
        } else {
            LandmarkConvention::Five
        }
    }

    pub fn anchors(&self) -> Anchors {
        let p = &self.points;
        match self.convention() {
            LandmarkConvention::Ibug68 => Anchors {
                eye_left: mean(&p[36..42]),
                eye_right: mean(&p[42..48]),
                mouth_left: p[48],
                mouth_right: p[54],
            },
            LandmarkConvention::Five => Anchors {
                eye_left: p[0],
                eye_right: p[1],
                mouth_left: p[3],
                mouth_right: p[4],
            },
        }
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !(0.0..=width as f64).contains(&p[0]) || !(0.0..=height as f64).contains(&p[1]) {
                return Err(Error::InvalidArgument(format!(
                    "landmark {i} at ({:.1}, {:.1}) is outside the {height}x{width} image",
                    p[0], p[1]
                )));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            points: self.points.iter().map(|p| scale(*p, s)).collect(),
        }
    }

    /// `{"points": [[x, y], ...]}`.
    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let raw: FaceLandmarks = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.into(),
            message: e.to_string(),
        })?;
        Self::new(raw.points)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::tensor_file::write_atomic(path.as_ref(), &serde_json::to_vec(self)?)
    }
}

/// The oriented square crop: `quad` is top-left, bottom-left, bottom-right,
/// top-right in source coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignTransform {
    pub quad: [Point; 4],
    pub qsize: f64,
}

impl AlignTransform {
    /// Square centred slightly below the eyes, oriented by the eye line and
    /// the eye-to-mouth vector, side `max(4 |eye_to_eye|, 3.6 |eye_to_mouth|)`.
    pub fn from_anchors(a: &Anchors) -> Result<Self> {
        let eye_avg = scale(add(a.eye_left, a.eye_right), 0.5);
        let eye_to_eye = sub(a.eye_right, a.eye_left);
        let mouth_avg = scale(add(a.mouth_left, a.mouth_right), 0.5);
        let eye_to_mouth = sub(mouth_avg, eye_avg);
        if norm(eye_to_eye) < 1e-6 {
            return Err(Error::InvalidArgument(
                "degenerate landmarks: zero inter-ocular distance".into(),
            ));
        }
        let mut x = [eye_to_eye[0] + eye_to_mouth[1], eye_to_eye[1] - eye_to_mouth[0]];
        let len = norm(x);
        if len < 1e-6 {
            return Err(Error::InvalidArgument(
                "degenerate landmarks: eye and mouth axes cancel".into(),
            ));
        }
        x = scale(x, (norm(eye_to_eye) * 2.0).max(norm(eye_to_mouth) * 1.8) / len);
        let y = [-x[1], x[0]];
        let c = add(eye_avg, scale(eye_to_mouth, 0.1));
        let quad = [
            sub(sub(c, x), y),
            add(sub(c, x), y),
            add(add(c, x), y),
            sub(add(c, x), y),
        ];
        Ok(Self {
            quad,
            qsize: norm(x) * 2.0,
        })
    }

    pub fn from_landmarks(lm: &FaceLandmarks) -> Result<Self> {
        Self::from_anchors(&lm.anchors())
    }

    /// Source point of output coordinate `(u, v)` for a `size` output.
    pub fn to_source(&self, u: f64, v: f64, size: usize) -> Point {
        let ex = sub(self.quad[3], self.quad[0]);
        let ey = sub(self.quad[1], self.quad[0]);
        let (fu, fv) = (u / size as f64, v / size as f64);
        add(self.quad[0], add(scale(ex, fu), scale(ey, fv)))
    }

    /// Output coordinate of source point `p`.
    pub fn to_output(&self, p: Point, size: usize) -> Point {
        let ex = sub(self.quad[3], self.quad[0]);
        let ey = sub(self.quad[1], self.quad[0]);
        let d = sub(p, self.quad[0]);
        [
            dot(d, ex) / dot(ex, ex) * size as f64,
            dot(d, ey) / dot(ey, ey) * size as f64,
        ]
    }

    fn scaled(&self, s: f64) -> Self {
        Self {
            quad: self.quad.map(|p| scale(p, s)),
            qsize: self.qsize * s,
        }
    }

    fn shifted(&self, by: Point) -> Self {
        Self {
            quad: self.quad.map(|p| sub(p, by)),
            qsize: self.qsize,
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let xs = self.quad.map(|p| p[0]);
        let ys = self.quad.map(|p| p[1]);
        let min = |v: [f64; 4]| v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = |v: [f64; 4]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (min(xs), min(ys), max(xs), max(ys))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub output_size: usize,
    /// Reflect-pad and fade when the crop leaves the frame; otherwise edge
    /// pixels are repeated.
    pub padding: bool,
    /// Upper bound on samples per output pixel and axis when minifying.
    pub max_supersample: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            output_size: 1024,
            padding: true,
            max_supersample: 4,
        }
    }
}

/// Integer box reduction; trailing rows/columns that do not fill a box are
/// dropped so coordinates scale by exactly `1 / factor`.
fn shrink(img: &Image, factor: usize) -> Image {
    let (h, w) = (img.height() / factor, img.width() / factor);
    let norm = 1.0 / (factor * factor) as f64;
    Image::from_fn(h, w, |c, r, col| {
        let mut s = 0.0f64;
        for dy in 0..factor {
            for dx in 0..factor {
                s += img.get(c, r * factor + dy, col * factor + dx) as f64;
            }
        }
        (s * norm) as f32
    })
}

/// Three running-box passes per axis (close to a Gaussian of `sigma`).
fn box_blur3(plane: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let width = ((4.0 * sigma * sigma + 1.0).sqrt().round() as usize) | 1;
    if width <= 1 {
        return plane.to_vec();
    }
    let r = (width / 2) as isize;
    let pass = |src: &[f32], len: usize, stride: usize, lines: usize, line_stride: usize| -> Vec<f32> {
        let mut out = vec![0f32; src.len()];
        let mut buf = vec![0f64; len];
        for line in 0..lines {
            let base = line * line_stride;
            let at = |i: isize| src[base + reflect_index(i, len) * stride] as f64;
            let mut acc: f64 = (-r..=r).map(at).sum();
            for (i, b) in buf.iter_mut().enumerate() {
                *b = acc / width as f64;
                acc += at(i as isize + r + 1) - at(i as isize - r);
            }
            for (i, b) in buf.iter().enumerate() {
                out[base + i * stride] = *b as f32;
            }
        }
        out
    };
    let mut x = plane.to_vec();
    for _ in 0..3 {
        x = pass(&x, w, 1, h, w);
        x = pass(&x, h, w, w, 1);
    }
    x
}

fn median(values: &[f32]) -> f32 {
    let mut v = values.to_vec();
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}

/// Reflect-pads by `(left, top, right, bottom)`. Padded pixels are blended
/// towards a blurred copy and then towards the per-channel median, both
/// ramping up with the distance from the frame; in-frame pixels are left
/// unchanged.
fn pad_and_fade(img: &Image, pad: [usize; 4], sigma: f64) -> Image {
    let [pl, pt, pr, pb] = pad;
    let (h, w) = (img.height(), img.width());
    let (ph, pw) = (h + pt + pb, w + pl + pr);
    let mut out = Image::from_fn(ph, pw, |c, r, col| {
        img.get(
            c,
            reflect_index(r as isize - pt as isize, h),
            reflect_index(col as isize - pl as isize, w),
        )
    });
    let ramp = |i: usize, lo: usize, n: usize, hi: usize| -> f64 {
        if i < lo {
            (lo - i) as f64 / lo as f64
        } else if i >= lo + n {
            (i + 1 - lo - n) as f64 / hi as f64
        } else {
            0.0
        }
    };
    let mask: Vec<f64> = (0..ph * pw)
        .map(|k| ramp(k % pw, pl, w, pr).max(ramp(k / pw, pt, h, pb)))
        .collect();
    for c in 0..3 {
        let blurred = box_blur3(out.plane(c), ph, pw, sigma);
        let med = median(img.plane(c)) as f64;
        let plane = &mut out.data_mut()[c * ph * pw..(c + 1) * ph * pw];
        for (k, v) in plane.iter_mut().enumerate() {
            let m = mask[k];
            if m > 0.0 {
                let mut x = *v as f64;
                x += (blurred[k] as f64 - x) * (3.0 * m).min(1.0);
                x += (med - x) * m.min(1.0);
                *v = x as f32;
            }
        }
    }
    out
}

/// Crops the face square given by the landmarks and resamples it to
/// `output_size` x `output_size`.
pub fn align_crop(raw: &Image, lm: &FaceLandmarks, cfg: &AlignConfig) -> Result<Image> {
    if cfg.output_size == 0 || cfg.max_supersample == 0 {
        return Err(Error::Config(format!("invalid alignment config {cfg:?}")));
    }
    lm.check_bounds(raw.height(), raw.width())?;
    let out = cfg.output_size;
    let mut t = AlignTransform::from_landmarks(lm)?;

    let factor = (t.qsize / out as f64 * 0.5).floor() as usize;
    let shrunk;
    let mut img = raw;
    if factor > 1 {
        shrunk = shrink(raw, factor);
        img = &shrunk;
        t = t.scaled(1.0 / factor as f64);
    }

    let border = ((t.qsize * 0.1).round() as isize).max(3);
    let (x0, y0, x1, y1) = t.bounds();
    let (h, w) = (img.height() as isize, img.width() as isize);
    let crop = [
        (x0.floor() as isize - border).max(0),
        (y0.floor() as isize - border).max(0),
        (x1.ceil() as isize + border).min(w),
        (y1.ceil() as isize + border).min(h),
    ];
    let cropped;
    if crop[2] - crop[0] < w || crop[3] - crop[1] < h {
        let (cw, ch) = ((crop[2] - crop[0]).max(1) as usize, (crop[3] - crop[1]).max(1) as usize);
        cropped = Image::from_fn(ch, cw, |c, r, col| {
            img.get(
                c,
                (r as isize + crop[1]).min(h - 1) as usize,
                (col as isize + crop[0]).min(w - 1) as usize,
            )
        });
        img = &cropped;
        t = t.shifted([crop[0] as f64, crop[1] as f64]);
    }

    let padded;
    if cfg.padding {
        let (x0, y0, x1, y1) = t.bounds();
        let (h, w) = (img.height() as isize, img.width() as isize);
        let mut pad = [
            (-(x0.floor() as isize) + border).max(0),
            (-(y0.floor() as isize) + border).max(0),
            (x1.ceil() as isize - w + border).max(0),
            (y1.ceil() as isize - h + border).max(0),
        ];
        if pad.iter().copied().max().unwrap_or(0) > border - 4 {
            let wide = (t.qsize * 0.3).round() as isize;
            pad = pad.map(|p| p.max(wide));
            padded = pad_and_fade(img, pad.map(|p| p as usize), t.qsize * 0.02);
            img = &padded;
            t = t.shifted([-pad[0] as f64, -pad[1] as f64]);
        }
    }

    let ss = ((t.qsize / out as f64 - 1e-6).ceil() as usize).clamp(1, cfg.max_supersample);
    let (h, w) = (img.height(), img.width());
    let mut data = vec![0f32; 3 * out * out];
    let rows: Vec<Vec<[f32; 3]>> = (0..out)
        .into_par_iter()
        .map(|r| {
            (0..out)
                .map(|col| {
                    let mut acc = [0f64; 3];
                    for sy in 0..ss {
                        for sx in 0..ss {
                            let u = col as f64 + (sx as f64 + 0.5) / ss as f64;
                            let v = r as f64 + (sy as f64 + 0.5) / ss as f64;
                            let p = t.to_source(u, v, out);
                            for (c, a) in acc.iter_mut().enumerate() {
                                *a += bilinear_clamped(img.plane(c), h, w, p[1] - 0.5, p[0] - 0.5) as f64;
                            }
                        }
                    }
                    acc.map(|a| (a / (ss * ss) as f64) as f32)
                })
                .collect()
        })
        .collect();
    for (r, row) in rows.iter().enumerate() {
        for (col, px) in row.iter().enumerate() {
            for c in 0..3 {
                data[c * out * out + r * out + col] = px[c];
            }
        }
    }
    Image::new(out, out, data)
}

/// Source of landmarks for an image file.
pub trait LandmarkDetector: Send + Sync {
    fn detect(&self, image: &Image, path: &Path) -> Result<FaceLandmarks>;
    fn name(&self) -> &str;
}

/// Reads precomputed landmarks from `{stem}.landmarks.json` next to the
/// image.
#[derive(Debug, Clone, Copy, Default)]
pub struct SidecarLandmarks;

impl SidecarLandmarks {
    pub fn path_for(image: &Path) -> PathBuf {
        let stem = image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        image.with_file_name(format!("{stem}.landmarks.json"))
    }
}

impl LandmarkDetector for SidecarLandmarks {
    fn detect(&self, _image: &Image, path: &Path) -> Result<FaceLandmarks> {
        FaceLandmarks::load_json(Self::path_for(path))
    }

    fn name(&self) -> &str {
        "sidecar"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignOutcome {
    pub id: String,
    pub result: std::result::Result<PathBuf, String>,
}

fn align_file(path: &Path, out_path: &Path, detector: &dyn LandmarkDetector, cfg: &AlignConfig) -> Result<()> {
    let raw = load_raw_image(path)?;
    let lm = detector.detect(&raw, path)?;
    save_image(&align_crop(&raw, &lm, cfg)?, out_path)
}

/// Aligns `(id, path)` inputs in parallel into `out_dir/{id}.png`.
pub fn align_files(
    inputs: &[(String, PathBuf)],
    out_dir: &Path,
    detector: &dyn LandmarkDetector,
    cfg: &AlignConfig,
) -> Result<Vec<AlignOutcome>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    Ok(inputs
        .par_iter()
        .map(|(id, path)| {
            let out_path = out_dir.join(format!("{id}.png"));
            AlignOutcome {
                id: id.clone(),
                result: align_file(path, &out_path, detector, cfg)
                    .map(|_| out_path)
                    .map_err(|e| e.to_string()),
            }
        })
        .collect())
}

/// Raw images of a directory (png/jpg/jpeg), keyed by stem.
pub fn raw_inputs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut v: Vec<(String, PathBuf)> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| {
                matches!(
                    x.to_string_lossy().to_ascii_lowercase().as_str(),
                    "png" | "jpg" | "jpeg"
                )
            })
        })
        .map(|p| {
            (
                p.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                p,
            )
        })
        .collect();
    v.sort();
    Ok(v)
}

/// Aligns every `fetched` record. Successes become `aligned`; failures keep
/// `fetched` and record the error.
pub fn align_manifest(
    manifest: &mut Manifest,
    manifest_path: Option<&Path>,
    raw_dir: &Path,
    out_dir: &Path,
    detector: &dyn LandmarkDetector,
    cfg: &AlignConfig,
    mut audit: Option<&mut AuditLog>,
) -> Result<Vec<AlignOutcome>> {
    let inputs: Vec<(String, PathBuf)> = manifest
        .records
        .iter()
        .filter(|r| r.status == Status::Fetched)
        .map(|r| (r.id.clone(), super::fetch::raw_path(raw_dir, r)))
        .collect();
    let outcomes = align_files(&inputs, out_dir, detector, cfg)?;
    for o in &outcomes {
        let (to, note) = match &o.result {
            Ok(_) => (Status::Aligned, String::new()),
            Err(e) => (Status::Fetched, e.clone()),
        };
        let event = manifest.transition(&o.id, to, None, &note)?;
        if let Some(log) = audit.as_deref_mut() {
            log.append(event)?;
        }
    }
    if let Some(p) = manifest_path {
        manifest.save(p)?;
    }
    Ok(outcomes)
}

/// Similarity transform from template units to pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// Pixels per template unit (the face is about two units tall).
    pub scale: f64,
    pub angle: f64,
    pub translate: Point,
}

impl Pose {
    fn apply(&self, p: Point) -> Point {
        let (s, c) = self.angle.sin_cos();
        [
            self.scale * (c * p[0] - s * p[1]) + self.translate[0],
            self.scale * (s * p[0] + c * p[1]) + self.translate[1],
        ]
    }

    fn invert(&self, p: Point) -> Point {
        let (s, c) = self.angle.sin_cos();
        let d = scale(sub(p, self.translate), 1.0 / self.scale);
        [c * d[0] + s * d[1], -s * d[0] + c * d[1]]
    }
}

/// Template anchor positions in template units.
pub const TEMPLATE_EYE_LEFT: Point = [-0.35, -0.2];
pub const TEMPLATE_EYE_RIGHT: Point = [0.35, -0.2];
pub const TEMPLATE_MOUTH: Point = [0.0, 0.45];
const MOUTH_HALF_WIDTH: f64 = 0.25;
/// Width of the blue marker blobs on the eyes and mouth, template units.
pub const TEMPLATE_MARKER_SIGMA: f64 = 0.06;

/// 68 iBUG-ordered template landmarks.
fn template_points() -> Vec<Point> {
    let ring = |centre: Point, rx: f64, ry: f64, n: usize, start: f64| -> Vec<Point> {
        (0..n)
            .map(|k| {
                let a = start + k as f64 * std::f64::consts::TAU / n as f64;
                [centre[0] + rx * a.cos(), centre[1] + ry * a.sin()]
            })
            .collect()
    };
    let mut p = Vec::with_capacity(68);
    // Jaw along the lower half of the face ellipse, image left to right.
    p.extend((0..17).map(|k| {
        let a = std::f64::consts::PI * (1.0 - k as f64 / 16.0);
        [-0.72 * a.cos(), 0.05 + 0.95 * a.sin() * 0.9]
    }));
    p.extend((0..5).map(|k| [-0.6 + 0.1 * k as f64, -0.42 + 0.02 * (k as f64 - 2.0).abs()]));
    p.extend((0..5).map(|k| [0.2 + 0.1 * k as f64, -0.42 + 0.02 * (k as f64 - 2.0).abs()]));
    p.extend((0..4).map(|k| [0.0, -0.15 + 0.1 * k as f64]));
    p.extend((0..5).map(|k| [-0.12 + 0.06 * k as f64, 0.25]));
    // Six-point eye rings with zero mean offset, so each mean is the centre.
    p.extend(ring(TEMPLATE_EYE_LEFT, 0.1, 0.05, 6, std::f64::consts::PI));
    p.extend(ring(TEMPLATE_EYE_RIGHT, 0.1, 0.05, 6, std::f64::consts::PI));
    // Outer lip starts at the image-left corner, so index 54 is the other one.
    p.extend(ring(TEMPLATE_MOUTH, MOUTH_HALF_WIDTH, 0.1, 12, std::f64::consts::PI));
    p.extend(ring(TEMPLATE_MOUTH, 0.15, 0.04, 8, std::f64::consts::PI));
    p
}

fn template_color(p: Point) -> [f32; 3] {
    let face = ((p[0] / 0.75).powi(2) + ((p[1] - 0.05) / 1.0).powi(2)).sqrt();
    let skin = 1.0 / (1.0 + ((face - 1.0) / 0.03).exp());
    let bg = [0.2 + 0.15 * (p[1] * 0.7).sin(), 0.3 + 0.1 * (p[0] * 0.9).cos(), -1.0];
    let tone = [0.7 - 0.1 * p[1], 0.25 + 0.05 * p[0], -1.0];
    let g = |c: Point| (-(norm(sub(p, c)).powi(2)) / (2.0 * TEMPLATE_MARKER_SIGMA * TEMPLATE_MARKER_SIGMA)).exp();
    let marker = g(TEMPLATE_EYE_LEFT) + g(TEMPLATE_EYE_RIGHT) + g(TEMPLATE_MOUTH);
    let mut out = [0f32; 3];
    for c in 0..2 {
        out[c] = (bg[c] * (1.0 - skin) + tone[c] * skin - 0.6 * marker) as f32;
    }
    out[2] = (-1.0 + 2.0 * marker) as f32;
    out
}

/// Smooth synthetic face rendered analytically at `pose`, with its 68
/// landmarks. The blue channel holds only Gaussian markers centred on the
/// eye centres and the mouth centre.
pub fn template_face(height: usize, width: usize, pose: &Pose) -> (Image, FaceLandmarks) {
    let img = Image::from_fn(height, width, |c, r, col| {
        template_color(pose.invert([col as f64 + 0.5, r as f64 + 0.5]))[c]
    });
    let lm = FaceLandmarks {
        points: template_points().into_iter().map(|p| pose.apply(p)).collect(),
    };
    (img, lm)
}

/// Pose whose alignment is the identity on a `size` x `size` frame.
pub fn canonical_pose(size: usize) -> Pose {
    let eye_to_eye = TEMPLATE_EYE_RIGHT[0] - TEMPLATE_EYE_LEFT[0];
    let eye_to_mouth = TEMPLATE_MOUTH[1] - TEMPLATE_EYE_LEFT[1];
    let half = (2.0 * eye_to_eye).max(1.8 * eye_to_mouth);
    let s = size as f64 / (2.0 * half);
    let centre_y = TEMPLATE_EYE_LEFT[1] + 0.1 * eye_to_mouth;
    Pose {
        scale: s,
        angle: 0.0,
        translate: [size as f64 / 2.0, size as f64 / 2.0 - centre_y * s],
    }
}
