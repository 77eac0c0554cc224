//! Metrics: Fréchet distance between embedding statistics, embedding cosine
//! similarity, and perceptual / squared-error reconstruction aggregates.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{downsample, load_image, Image};
use crate::losses::perceptual::PerceptualNet;
use crate::rng;
use crate::tensor_file::{NamedArray, TensorFile};

/// Maps images to fixed-length feature vectors.
pub trait Embedder: Send + Sync {
    /// `(B, 3, H, W)` in `[-1, 1]` to one vector per image.
    fn embed(&self, images: &Tensor) -> Result<Vec<Vec<f64>>>;
    fn dim(&self) -> usize;
    /// Distinguishes backends and weights in caches and reports.
    fn id(&self) -> String;
}

/// Downsample to a fixed grid, then `tanh(W x + b)` with a seeded random
/// projection.
#[derive(Debug, Clone)]
pub struct ProjectionEmbedder {
    grid: usize,
    weight: Tensor,
    bias: Tensor,
    id: String,
}

impl ProjectionEmbedder {
    pub fn toy(seed: u64, dim: usize, device: &Device) -> Result<Self> {
        let grid = 16;
        let inputs = 3 * grid * grid;
        let mut r = rng::seeded(seed);
        let weight = (rng::normal_tensor(&mut r, (dim, inputs), device, DType::F64)? * (1.0 / (inputs as f64).sqrt()))?;
        let bias = (rng::normal_tensor(&mut r, dim, device, DType::F64)? * 0.1)?;
        // Stored weights are f32; rounding here makes save/load exact.
        let (weight, bias) = (
            weight.to_dtype(DType::F32)?.to_dtype(DType::F64)?,
            bias.to_dtype(DType::F32)?.to_dtype(DType::F64)?,
        );
        Ok(Self {
            grid,
            weight,
            bias,
            id: format!("toy-projection-{seed:x}-{dim}"),
        })
    }

    /// Weights from a tensor file of kind `embedder` holding `weight`
    /// `(d, 3*g*g)` and `bias` `(d,)`.
    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let f = TensorFile::read_kind(path, "embedder")?;
        let weight = f.require("weight")?.to_tensor(device, DType::F64)?;
        let bias = f.require("bias")?.to_tensor(device, DType::F64)?;
        let (d, inputs) = weight.dims2()?;
        let grid = ((inputs / 3) as f64).sqrt().round() as usize;
        if 3 * grid * grid != inputs || bias.dims() != [d] {
            return Err(Error::Format {
                path: path.into(),
                message: format!(
                    "embedder weight {:?} / bias {:?} do not describe a square RGB grid",
                    weight.dims(),
                    bias.dims()
                ),
            });
        }
        let digest = hex::encode(&Sha256::digest(std::fs::read(path).map_err(|e| Error::io(path, e))?)[..6]);
        Ok(Self {
            grid,
            weight,
            bias,
            id: format!("pretrained-{digest}"),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = TensorFile::new("embedder", serde_json::json!({ "grid": self.grid }));
        f.push(NamedArray::from_tensor("weight", &self.weight)?);
        f.push(NamedArray::from_tensor("bias", &self.bias)?);
        f.write(path)
    }
}

impl Embedder for ProjectionEmbedder {
    fn embed(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let x = downsample(&images.to_dtype(DType::F64)?, self.grid)?.flatten_from(1)?;
        let y = x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?.tanh()?;
        Ok(y.to_vec2::<f64>()?)
    }

    fn dim(&self) -> usize {
        self.weight.dims()[0]
    }

    fn id(&self) -> String {
        self.id.clone()
    }
}

/// Backend by name: `toy` or `pretrained` (needs a weights file).
pub fn embedder_from_name(name: &str, weights: Option<&Path>, device: &Device) -> Result<Box<dyn Embedder>> {
    match name {
        "toy" => Ok(Box::new(ProjectionEmbedder::toy(0xE3BED, 64, device)?)),
        "pretrained" => match weights {
            Some(p) => Ok(Box::new(ProjectionEmbedder::load(p, device)?)),
            None => Err(Error::BackendUnavailable(
                "pretrained embedder requires a weights file".into(),
            )),
        },
        other => Err(Error::Config(format!(
            "unknown embedder backend {other:?} (expected toy or pretrained)"
        ))),
    }
}

pub fn embed_images(images: &[Image], embedder: &dyn Embedder) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        out.extend(embedder.embed(&Image::batch_to_tensor(chunk, &Device::Cpu, DType::F32)?)?);
    }
    Ok(out)
}

/// Gaussian fit of a feature set: mean and unbiased covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub covariance: Vec<f64>,
    pub n: usize,
    pub backend: String,
}

impl FeatureStats {
    pub fn from_features(features: &[Vec<f64>], backend: impl Into<String>) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "feature statistics need at least 2 samples, got {n}"
            )));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::Shape("feature vectors of different lengths".into()));
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = x.row_mean();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = (centered.transpose() * &centered) / (n - 1) as f64;
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self {
            mean: mean.iter().copied().collect(),
            covariance: cov.transpose().iter().copied().collect(),
            n,
            backend: backend.into(),
        })
    }

    pub fn from_images(images: &[Image], embedder: &dyn Embedder) -> Result<Self> {
        Self::from_features(&embed_images(images, embedder)?, embedder.id())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn mean_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    fn cov_mat(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.covariance)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = serde_json::to_vec(self)?;
        crate::tensor_file::write_atomic(path, &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Below this (relative to the largest eigenvalue) a negative eigenvalue is
/// treated as an error rather than rounding noise.
const EIGEN_NOISE: f64 = 1e-6;

/// Squared Fréchet distance between two Gaussians:
/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`.
///
/// The trace of the square root is taken from the eigenvalues of the
/// symmetric `S1^(1/2) S2 S1^(1/2)`; the result is averaged with the swapped
/// evaluation so it is exactly symmetric.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let d = 0.5 * (frechet_one_way(a, b)? + frechet_one_way(b, a)?);
    Ok(d.max(0.0))
}

fn frechet_one_way(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let diff = a.mean_vec() - b.mean_vec();
    let (s1, s2) = (a.cov_mat(), b.cov_mat());
    let root1 = psd_sqrt(&s1)?;
    let m = &root1 * &s2 * &root1;
    let m = (&m + m.transpose()) * 0.5;
    let tr_sqrt: f64 = clipped_eigenvalues(&m)?.iter().map(|v| v.sqrt()).sum();
    Ok(diff.norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt)
}

fn clipped_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let eig = SymmetricEigen::try_new(m.clone(), 1e-14, 10_000)
        .ok_or_else(|| Error::Numerical("symmetric eigendecomposition did not converge".into()))?;
    let scale = eig.eigenvalues.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    eig.eigenvalues
        .iter()
        .map(|&v| {
            if v >= 0.0 {
                Ok(v)
            } else if v >= -EIGEN_NOISE * scale {
                Ok(0.0)
            } else {
                Err(Error::Numerical(format!(
                    "covariance product has eigenvalue {v:e}; not positive semidefinite"
                )))
            }
        })
        .collect()
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let values = clipped_eigenvalues(&sym)?;
    let eig = SymmetricEigen::try_new(sym, 1e-14, 10_000)
        .ok_or_else(|| Error::Numerical("symmetric eigendecomposition did not converge".into()))?;
    let q = &eig.eigenvectors;
    let root = DMatrix::from_diagonal(&DVector::from_iterator(values.len(), values.iter().map(|v| v.sqrt())));
    Ok(q * root * q.transpose())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub fn identity_similarity(a: &Image, b: &Image, embedder: &dyn Embedder) -> Result<f64> {
    let e = embed_images(&[a.clone(), b.clone()], embedder)?;
    Ok(cosine(&e[0], &e[1]))
}

/// Mean squared error over every channel value.
pub fn l2(a: &Image, b: &Image) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape(format!(
            "image pair {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub identity_similarity: Option<f64>,
    pub lpips: Option<f64>,
    pub l2: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: Option<f64>,
    pub identity_similarity_mean: Option<f64>,
    pub lpips_mean: Option<f64>,
    pub l2_mean: Option<f64>,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    /// Recomputes every mean from the rows.
    pub fn reconcile(&mut self) {
        let mean = |f: fn(&MetricRow) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = self.rows.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        self.identity_similarity_mean = mean(|r| r.identity_similarity);
        self.lpips_mean = mean(|r| r.lpips);
        self.l2_mean = mean(|r| r.l2);
    }

    /// Per-item rows followed by a `mean` row; `fid` is only on the mean row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            id: &'a str,
            identity_similarity: Option<f64>,
            lpips: Option<f64>,
            l2: Option<f64>,
            fid: Option<f64>,
        }
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(Line {
                id: &r.id,
                identity_similarity: r.identity_similarity,
                lpips: r.lpips,
                l2: r.l2,
                fid: None,
            })?;
        }
        w.serialize(Line {
            id: "mean",
            identity_similarity: self.identity_similarity_mean,
            lpips: self.lpips_mean,
            l2: self.l2_mean,
            fid: self.fid,
        })?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Perceptual and squared-error distance for each pair, with means.
pub fn reconstruction_metrics(pairs: &[(String, Image, Image)], perceptual: &PerceptualNet) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "reconstruction metrics need at least one pair".into(),
        ));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for (id, a, b) in pairs {
        let l2v = l2(a, b)?;
        let ta = a.to_tensor(perceptual.device(), perceptual.dtype())?;
        let tb = b.to_tensor(perceptual.device(), perceptual.dtype())?;
        let lp = perceptual.distance(&ta, &tb)?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0];
        rows.push(MetricRow {
            id: id.clone(),
            identity_similarity: None,
            lpips: Some(lp),
            l2: Some(l2v),
        });
    }
    let mut report = MetricReport {
        rows,
        ..MetricReport::default()
    };
    report.reconcile();
    Ok(report)
}

/// Cosine similarity for each pair, with the mean.
pub fn identity_report(pairs: &[(String, Image, Image)], embedder: &dyn Embedder) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "identity similarity needs at least one pair".into(),
        ));
    }
    let rows = pairs
        .iter()
        .map(|(id, a, b)| {
            Ok(MetricRow {
                id: id.clone(),
                identity_similarity: Some(identity_similarity(a, b, embedder)?),
                lpips: None,
                l2: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = MetricReport {
        rows,
        ..MetricReport::default()
    };
    report.reconcile();
    Ok(report)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Images of a directory keyed by file stem, sorted.
pub fn load_image_dir(dir: impl AsRef<Path>) -> Result<Vec<(String, Image)>> {
    png_files(dir.as_ref())?
        .into_iter()
        .map(|p| {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((id, load_image(&p)?))
        })
        .collect()
}

/// Pairs images of two directories by file stem; every stem must exist in
/// both.
pub fn paired_dirs(a: impl AsRef<Path>, b: impl AsRef<Path>) -> Result<Vec<(String, Image, Image)>> {
    let left = load_image_dir(&a)?;
    let mut right: std::collections::BTreeMap<String, Image> = load_image_dir(&b)?.into_iter().collect();
    let mut pairs = Vec::with_capacity(left.len());
    for (id, img) in left {
        let other = right.remove(&id).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "{id}.png is in {} but not in {}",
                a.as_ref().display(),
                b.as_ref().display()
            ))
        })?;
        pairs.push((id, img, other));
    }
    if let Some(extra) = right.keys().next() {
        return Err(Error::InvalidArgument(format!(
            "{extra}.png is only in {}",
            b.as_ref().display()
        )));
    }
    Ok(pairs)
}

/// Content digest of the `*.png` files of a directory (names and bytes).
pub fn dir_hash(dir: impl AsRef<Path>) -> Result<String> {
    let mut h = Sha256::new();
    for p in png_files(dir.as_ref())? {
        h.update(
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
                .as_bytes(),
        );
        h.update([0]);
        h.update(std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Feature statistics of a directory, reused from `cache_dir` when a file
/// for the same (content digest, backend) pair exists.
pub fn cached_dir_stats(
    dir: impl AsRef<Path>,
    embedder: &dyn Embedder,
    cache_dir: Option<&Path>,
) -> Result<FeatureStats> {
    let dir = dir.as_ref();
    let key = cache_dir.map(|c| -> Result<PathBuf> {
        let digest = hex::encode(&Sha256::digest(format!("{}|{}", dir_hash(dir)?, embedder.id()))[..16]);
        Ok(c.join(format!("stats-{digest}.json")))
    });
    if let Some(Ok(path)) = &key {
        if path.exists() {
            return FeatureStats::load(path);
        }
    }
    let images: Vec<Image> = load_image_dir(dir)?.into_iter().map(|(_, i)| i).collect();
    let stats = FeatureStats::from_images(&images, embedder)?;
    if let Some(path) = key {
        let path = path?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        stats.save(&path)?;
    }
    Ok(stats)
}

pub fn fid_between_dirs(
    a: impl AsRef<Path>,
    b: impl AsRef<Path>,
    embedder: &dyn Embedder,
    cache_dir: Option<&Path>,
) -> Result<f64> {
    frechet_distance(
        &cached_dir_stats(a, embedder, cache_dir)?,
        &cached_dir_stats(b, embedder, cache_dir)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::save_image;
    use rand::{Rng, SeedableRng};

    fn diag_stats(mean: &[f64], var: &[f64]) -> FeatureStats {
        let d = mean.len();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = var[i];
        }
        FeatureStats {
            mean: mean.to_vec(),
            covariance: cov,
            n: 100,
            backend: "hand".into(),
        }
    }

    #[test]
    fn diagonal_gaussians_closed_form() {
        let a = diag_stats(&[0.0, 0.0], &[1.0, 1.0]);
        let b = diag_stats(&[1.0, 0.0], &[4.0, 4.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 3.0).abs() <= 1e-6);
        assert!(frechet_distance(&a, &a).unwrap().abs() <= 1e-8);
    }

    #[test]
    fn textbook_mean_and_covariance() {
        let f = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 7.0]];
        let s = FeatureStats::from_features(&f, "hand").unwrap();
        assert_eq!(s.mean, vec![3.0, 5.0]);
        // var x = 4, var y = 7, cov = (-2*-3 + 0 + 2*2) / 2 = 5
        let expected = [4.0, 5.0, 5.0, 7.0];
        for (a, b) in s.covariance.iter().zip(expected) {
            assert!((a - b).abs() <= 1e-9);
        }
        assert!(FeatureStats::from_features(&f[..1], "hand").is_err());
    }

    #[test]
    fn identical_images_have_zero_covariance() {
        let e = ProjectionEmbedder::toy(1, 8, &Device::Cpu).unwrap();
        let img = Image::from_fn(16, 16, |c, r, col| ((c + r + col) as f32 * 0.1).sin());
        let s = FeatureStats::from_images(&[img.clone(), img.clone(), img], &e).unwrap();
        assert!(s.covariance.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn stats_are_order_invariant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let f: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut g = f.clone();
        g.reverse();
        g.swap(3, 11);
        let (a, b) = (
            FeatureStats::from_features(&f, "x").unwrap(),
            FeatureStats::from_features(&g, "x").unwrap(),
        );
        for (x, y) in a.mean.iter().zip(&b.mean).chain(a.covariance.iter().zip(&b.covariance)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut sample = |shift: f64| -> FeatureStats {
            let f: Vec<Vec<f64>> = (0..40)
                .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0) + shift).collect())
                .collect();
            FeatureStats::from_features(&f, "x").unwrap()
        };
        let (a, b) = (sample(0.0), sample(0.3));
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        assert_eq!(ab, ba);
        assert!(ab > 0.0);
        assert!(frechet_distance(&a, &diag_stats(&[0.0; 3], &[1.0; 3])).is_err());
    }

    #[test]
    fn identity_similarity_contract() {
        let e = ProjectionEmbedder::toy(5, 32, &Device::Cpu).unwrap();
        let a = Image::from_fn(32, 32, |c, r, col| ((c * 3 + r + col) as f32 * 0.07).cos() * 0.8);
        let b = Image::from_fn(32, 32, |c, r, col| ((c + r * 2 + col) as f32 * 0.05).sin() * 0.5);
        assert!((identity_similarity(&a, &a, &e).unwrap() - 1.0).abs() <= 1e-7);
        let (ab, ba) = (
            identity_similarity(&a, &b, &e).unwrap(),
            identity_similarity(&b, &a, &e).unwrap(),
        );
        assert!((ab - ba).abs() <= 1e-7 && (-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn l2_matches_hand_sum() {
        let a = Image::new(2, 2, (0..12).map(|v| v as f32 / 12.0).collect()).unwrap();
        let b = Image::filled(2, 2, 0.25);
        let expected: f64 = (0..12).map(|v| (v as f64 / 12.0 - 0.25).powi(2)).sum::<f64>() / 12.0;
        assert!((l2(&a, &b).unwrap() - expected).abs() <= 1e-9);
    }

    #[test]
    fn reconstruction_means_reconcile() {
        let p = PerceptualNet::toy(0x5EED, &Device::Cpu, DType::F32).unwrap();
        let pairs: Vec<(String, Image, Image)> = (0..4)
            .map(|k| {
                let a = Image::from_fn(16, 16, |c, r, col| ((k + c + r + col) as f32 * 0.1).sin());
                let b = Image::from_fn(16, 16, |c, r, col| ((k * 2 + c + r * col) as f32 * 0.1).cos());
                (format!("p{k}"), a, b)
            })
            .collect();
        let same: Vec<_> = pairs
            .iter()
            .map(|(id, a, _)| (id.clone(), a.clone(), a.clone()))
            .collect();
        let zero = reconstruction_metrics(&same, &p).unwrap();
        assert_eq!((zero.lpips_mean, zero.l2_mean), (Some(0.0), Some(0.0)));
        let r = reconstruction_metrics(&pairs, &p).unwrap();
        let l2m = r.rows.iter().map(|x| x.l2.unwrap()).sum::<f64>() / 4.0;
        let lpm = r.rows.iter().map(|x| x.lpips.unwrap()).sum::<f64>() / 4.0;
        assert!((r.l2_mean.unwrap() - l2m).abs() <= 1e-9 && (r.lpips_mean.unwrap() - lpm).abs() <= 1e-9);
        assert!(reconstruction_metrics(&[], &p).is_err());
    }

    #[test]
    fn dir_stats_cache_and_fid() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b, cache) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("cache"));
        for (d, shift) in [(&a, 0.0f32), (&b, 0.4)] {
            std::fs::create_dir_all(d).unwrap();
            for k in 0..6 {
                let img = Image::from_fn(16, 16, |c, r, col| {
                    (((k * 7 + c + r + col) as f32 * 0.3).sin() * 0.5 + shift).clamp(-1.0, 1.0)
                });
                save_image(&img, d.join(format!("{k}.png"))).unwrap();
            }
        }
        let e = ProjectionEmbedder::toy(3, 16, &Device::Cpu).unwrap();
        let first = fid_between_dirs(&a, &b, &e, Some(&cache)).unwrap();
        assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 2);
        assert_eq!(fid_between_dirs(&a, &b, &e, Some(&cache)).unwrap(), first);
        assert!(fid_between_dirs(&a, &a, &e, None).unwrap().abs() <= 1e-8);
        assert!(first > 0.0);
    }

    #[test]
    fn embedder_file_round_trip_and_backend_names() {
        let e = ProjectionEmbedder::toy(8, 12, &Device::Cpu).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        e.save(&path).unwrap();
        let loaded = embedder_from_name("pretrained", Some(&path), &Device::Cpu).unwrap();
        let img = Image::from_fn(32, 32, |c, r, col| ((c + r + col) as f32 * 0.05).sin());
        assert_eq!(
            embed_images(std::slice::from_ref(&img), &e).unwrap(),
            embed_images(&[img], loaded.as_ref()).unwrap()
        );
        assert!(matches!(
            embedder_from_name("pretrained", None, &Device::Cpu),
            Err(Error::BackendUnavailable(_))
        ));
        assert!(embedder_from_name("inception", None, &Device::Cpu).is_err());
    }

    #[test]
    fn paired_dirs_require_matching_stems() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        std::fs::create_dir_all(&a).unwrap();
        std::fs::create_dir_all(&b).unwrap();
        save_image(&Image::filled(4, 4, 0.0), a.join("x.png")).unwrap();
        save_image(&Image::filled(4, 4, 0.0), b.join("x.png")).unwrap();
        assert_eq!(paired_dirs(&a, &b).unwrap().len(), 1);
        save_image(&Image::filled(4, 4, 0.0), b.join("y.png")).unwrap();
        assert!(paired_dirs(&a, &b).is_err());
    }
}
