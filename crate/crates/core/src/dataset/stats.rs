//! Summary statistics of an image directory. Pixel values are in the
//! library's `[-1, 1]` range.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::align::raw_inputs;
use crate::error::{Error, Result};
use crate::imaging::{load_raw_image, save_image, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    /// `"{height}x{width}"` to image count.
    pub resolution_histogram: BTreeMap<String, usize>,
    /// Resolution of `mean_image`: the most common one (ties go to the
    /// smallest).
    pub mean_resolution: Option<(usize, usize)>,
    /// Per-channel mean and population variance over every pixel of every
    /// image.
    pub channel_mean: [f64; 3],
    pub channel_var: [f64; 3],
    pub pixel_count: u64,
    #[serde(skip)]
    pub mean_image: Option<Image>,
}

#[derive(Default)]
struct Accumulator {
    count: usize,
    by_res: BTreeMap<(usize, usize), (usize, Vec<f64>)>,
    sum: [f64; 3],
    sum_sq: [f64; 3],
    pixels: u64,
}

impl Accumulator {
    fn add(&mut self, img: &Image) {
        self.count += 1;
        let (h, w) = (img.height(), img.width());
        let (n, sum) = self.by_res.entry((h, w)).or_insert_with(|| (0, vec![0.0; 3 * h * w]));
        *n += 1;
        for (s, v) in sum.iter_mut().zip(img.data()) {
            *s += *v as f64;
        }
        for c in 0..3 {
            for v in img.plane(c) {
                let v = *v as f64;
                self.sum[c] += v;
                self.sum_sq[c] += v * v;
            }
        }
        self.pixels += (h * w) as u64;
    }

    fn finish(self) -> Result<DatasetStats> {
        let modal = self
            .by_res
            .iter()
            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.0.cmp(a.0)))
            .map(|(k, (n, sum))| (*k, *n, sum));
        let mean_image = match modal {
            Some(((h, w), n, sum)) => Some(Image::new(h, w, sum.iter().map(|s| (s / n as f64) as f32).collect())?),
            None => None,
        };
        let p = self.pixels.max(1) as f64;
        let channel_mean = self.sum.map(|s| s / p);
        let mut channel_var = [0.0; 3];
        for c in 0..3 {
            channel_var[c] = (self.sum_sq[c] / p - channel_mean[c] * channel_mean[c]).max(0.0);
        }
        Ok(DatasetStats {
            count: self.count,
            resolution_histogram: self
                .by_res
                .iter()
                .map(|((h, w), (n, _))| (format!("{h}x{w}"), *n))
                .collect(),
            mean_resolution: modal.map(|(k, _, _)| k),
            channel_mean,
            channel_var,
            pixel_count: self.pixels,
            mean_image,
        })
    }
}

pub fn stats_of_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<DatasetStats> {
    let mut acc = Accumulator::default();
    for img in images {
        acc.add(img);
    }
    acc.finish()
}

/// Statistics over every png/jpg in `dir`, loading one image at a time.
pub fn dataset_stats(dir: impl AsRef<Path>) -> Result<DatasetStats> {
    let mut acc = Accumulator::default();
    for (_, path) in raw_inputs(dir.as_ref())? {
        acc.add(&load_raw_image(&path)?);
    }
    acc.finish()
}

impl DatasetStats {
    /// `stats.json` plus `mean.png` when there is a mean image.
    pub fn write(&self, out_dir: impl AsRef<Path>) -> Result<()> {
        let out_dir = out_dir.as_ref();
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        crate::tensor_file::write_atomic(&out_dir.join("stats.json"), &serde_json::to_vec_pretty(self)?)?;
        if let Some(m) = &self.mean_image {
            save_image(m, out_dir.join("mean.png"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::load_image;

    fn img(h: usize, w: usize, k: usize) -> Image {
        Image::from_fn(h, w, |c, r, col| {
            (((k * 5 + c * 3 + r * 7 + col * 11) % 17) as f32 / 8.0 - 1.0) * 0.9
        })
    }

    #[test]
    fn single_image_mean_is_that_image() {
        let a = img(5, 4, 1);
        let s = stats_of_images([&a]).unwrap();
        assert_eq!(s.mean_image.unwrap(), a);
        assert_eq!(s.count, 1);
    }

    #[test]
    fn moments_match_brute_force() {
        let images: Vec<Image> = (0..6).map(|k| img(6 + k % 2, 5, k)).collect();
        let s = stats_of_images(&images).unwrap();
        for c in 0..3 {
            let all: Vec<f64> = images
                .iter()
                .flat_map(|i| i.plane(c).iter().map(|v| *v as f64))
                .collect();
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
            assert!((s.channel_mean[c] - mean).abs() <= 1e-6);
            assert!((s.channel_var[c] - var).abs() <= 1e-6);
        }
        // Three images each at 6x5 and 7x5; ties go to the smaller resolution.
        assert_eq!(s.mean_resolution, Some((6, 5)));
        let group: Vec<&Image> = images.iter().filter(|i| i.height() == 6).collect();
        let m = s.mean_image.unwrap();
        for (k, v) in m.data().iter().enumerate() {
            let want = group.iter().map(|i| i.data()[k] as f64).sum::<f64>() / group.len() as f64;
            assert!((*v as f64 - want).abs() <= 1e-6);
        }
    }

    #[test]
    fn directory_counts_match_the_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        for k in 0..3 {
            save_image(&img(8, 8, k), dir.path().join(format!("{k}.png"))).unwrap();
        }
        save_image(&img(4, 6, 9), dir.path().join("wide.png")).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "not an image").unwrap();
        let s = dataset_stats(dir.path()).unwrap();
        assert_eq!(s.count, 4);
        assert_eq!(
            s.resolution_histogram,
            BTreeMap::from([("8x8".to_string(), 3), ("4x6".to_string(), 1)])
        );
        let out = dir.path().join("report");
        s.write(&out).unwrap();
        let back: DatasetStats = serde_json::from_slice(&std::fs::read(out.join("stats.json")).unwrap()).unwrap();
        assert_eq!(back.count, 4);
        assert_eq!(load_image(out.join("mean.png")).unwrap().height(), 8);
    }

    #[test]
    fn empty_directory() {
        let dir = tempfile::tempdir().unwrap();
        let s = dataset_stats(dir.path()).unwrap();
        assert_eq!((s.count, s.mean_image.is_none()), (0, true));
    }
}
