//! LPIPS-style perceptual distance over a fixed convolutional pyramid.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv2d;
use crate::rng;
use crate::tensor_file::{NamedArray, TensorFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Avg,
    Max,
}

/// Stage layout: each stage is a run of 3x3 conv + ReLU layers; features are
/// tapped at the end of every stage and a 2x pool separates stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneLayout {
    pub stages: Vec<Vec<usize>>,
    pub pooling: Pooling,
}

impl BackboneLayout {
    pub fn toy() -> Self {
        Self {
            stages: vec![vec![16], vec![32], vec![64], vec![64]],
            pooling: Pooling::Avg,
        }
    }

    pub fn vgg16() -> Self {
        Self {
            stages: vec![
                vec![64, 64],
                vec![128, 128],
                vec![256, 256, 256],
                vec![512, 512, 512],
                vec![512, 512, 512],
            ],
            pooling: Pooling::Max,
        }
    }
}

/// Per-channel input shift and scale of the standard LPIPS scaling layer.
const LPIPS_SHIFT: [f32; 3] = [-0.030, -0.088, -0.188];
const LPIPS_SCALE: [f32; 3] = [0.458, 0.448, 0.450];

/// Zero biases would make a ReLU backbone positively homogeneous, and the
/// unit-normalized distance then could not see brightness or contrast.
const RANDOM_BIAS_STD: f64 = 0.1;

#[derive(Debug, Clone)]
struct Conv {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
    relu: bool,
}

#[derive(Debug, Clone)]
pub struct PerceptualNet {
    layout: BackboneLayout,
    convs: Vec<Vec<Conv>>,
    /// Per-stage non-negative channel weights, shape `(1, C, 1, 1)`.
    lin: Vec<Tensor>,
    /// Optional input affine `(x - shift) / scale`, per channel.
    input_norm: Option<(Tensor, Tensor)>,
    device: Device,
    dtype: DType,
}

impl PerceptualNet {
    /// Randomly initialized (He-normal) backbone with small random biases,
    /// the LPIPS input scaling and uniform channel weights.
    pub fn random(layout: BackboneLayout, seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        let mut rng = rng::seeded(seed);
        let mut convs = Vec::new();
        let mut lin = Vec::new();
        let mut cin = 3;
        for stage in &layout.stages {
            let mut layers = Vec::new();
            for &cout in stage {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                layers.push(Conv {
                    weight: (rng::normal_tensor(&mut rng, (cout, cin, 3, 3), device, dtype)? * std)?,
                    bias: (rng::normal_tensor(&mut rng, cout, device, dtype)? * RANDOM_BIAS_STD)?,
                    padding: 1,
                    relu: true,
                });
                cin = cout;
            }
            lin.push(Tensor::ones((1, cin, 1, 1), dtype, device)?);
            convs.push(layers);
        }
        Ok(Self {
            layout,
            convs,
            lin,
            input_norm: Some((
                Tensor::new(&LPIPS_SHIFT, device)?
                    .to_dtype(dtype)?
                    .reshape((1, 3, 1, 1))?,
                Tensor::new(&LPIPS_SCALE, device)?
                    .to_dtype(dtype)?
                    .reshape((1, 3, 1, 1))?,
            )),
            device: device.clone(),
            dtype,
        })
    }

    pub fn toy(seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        Self::random(BackboneLayout::toy(), seed, device, dtype)
    }

    /// A single tapped conv layer with explicit weights `(Cout, Cin, k, k)`,
    /// no padding, no ReLU. Used for closed-form checks.
    pub fn single_layer(weight: Tensor, bias: Tensor, lin: Tensor) -> Result<Self> {
        let device = weight.device().clone();
        let dtype = weight.dtype();
        let cout = weight.dims()[0];
        Ok(Self {
            layout: BackboneLayout {
                stages: vec![vec![cout]],
                pooling: Pooling::Avg,
            },
            convs: vec![vec![Conv {
                weight,
                bias,
                padding: 0,
                relu: false,
            }]],
            lin: vec![lin.reshape((1, cout, 1, 1))?],
            input_norm: None,
            device,
            dtype,
        })
    }

    /// Loads a backbone container (kind `perceptual_backbone`) with arrays
    /// `stage{s}.conv{i}.weight|bias`, `lin{s}` and optional `input_shift` /
    /// `input_scale`.
    pub fn load(path: impl AsRef<Path>, device: &Device, dtype: DType) -> Result<Self> {
        let f = TensorFile::read_kind(path, "perceptual_backbone")?;
        let layout: BackboneLayout = serde_json::from_value(f.meta["layout"].clone())?;
        let mut convs = Vec::new();
        let mut lin = Vec::new();
        for (s, stage) in layout.stages.iter().enumerate() {
            let mut layers = Vec::new();
            for i in 0..stage.len() {
                layers.push(Conv {
                    weight: f
                        .require(&format!("stage{s}.conv{i}.weight"))?
                        .to_tensor(device, dtype)?,
                    bias: f.require(&format!("stage{s}.conv{i}.bias"))?.to_tensor(device, dtype)?,
                    padding: 1,
                    relu: true,
                });
            }
            let c = *stage
                .last()
                .ok_or_else(|| Error::Config("empty backbone stage".into()))?;
            lin.push(
                f.require(&format!("lin{s}"))?
                    .to_tensor(device, dtype)?
                    .reshape((1, c, 1, 1))?,
            );
            convs.push(layers);
        }
        let input_norm = match (f.get("input_shift"), f.get("input_scale")) {
            (Some(a), Some(b)) => Some((
                a.to_tensor(device, dtype)?.reshape((1, 3, 1, 1))?,
                b.to_tensor(device, dtype)?.reshape((1, 3, 1, 1))?,
            )),
            _ => None,
        };
        Ok(Self {
            layout,
            convs,
            lin,
            input_norm,
            device: device.clone(),
            dtype,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = TensorFile::new("perceptual_backbone", serde_json::json!({"layout": self.layout}));
        for (s, stage) in self.convs.iter().enumerate() {
            for (i, c) in stage.iter().enumerate() {
                f.push(NamedArray::from_tensor(format!("stage{s}.conv{i}.weight"), &c.weight)?);
                f.push(NamedArray::from_tensor(format!("stage{s}.conv{i}.bias"), &c.bias)?);
            }
            f.push(NamedArray::from_tensor(format!("lin{s}"), &self.lin[s].flatten_all()?)?);
        }
        if let Some((shift, scale)) = &self.input_norm {
            f.push(NamedArray::from_tensor("input_shift", &shift.flatten_all()?)?);
            f.push(NamedArray::from_tensor("input_scale", &scale.flatten_all()?)?);
        }
        f.write(path)
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let cast = |t: &Tensor| t.to_dtype(dtype);
        Ok(Self {
            layout: self.layout.clone(),
            convs: self
                .convs
                .iter()
                .map(|st| {
                    st.iter()
                        .map(|c| {
                            Ok(Conv {
                                weight: cast(&c.weight)?,
                                bias: cast(&c.bias)?,
                                padding: c.padding,
                                relu: c.relu,
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?,
            lin: self.lin.iter().map(cast).collect::<candle_core::Result<Vec<_>>>()?,
            input_norm: match &self.input_norm {
                Some((a, b)) => Some((cast(a)?, cast(b)?)),
                None => None,
            },
            device: self.device.clone(),
            dtype,
        })
    }

    /// Raw feature maps at every tap.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.to_dtype(self.dtype)?;
        if let Some((shift, scale)) = &self.input_norm {
            h = h.broadcast_sub(shift)?.broadcast_div(scale)?;
        }
        let mut taps = Vec::with_capacity(self.convs.len());
        for (s, stage) in self.convs.iter().enumerate() {
            if s > 0 {
                let (_, _, hh, ww) = h.dims4()?;
                if hh >= 2 && ww >= 2 {
                    h = match self.layout.pooling {
                        Pooling::Avg => h.avg_pool2d(2)?,
                        Pooling::Max => h.max_pool2d(2)?,
                    };
                }
            }
            for c in stage {
                let cout = c.weight.dims()[0];
                h = conv2d(&h, &c.weight, c.padding)?.broadcast_add(&c.bias.reshape((1, cout, 1, 1))?)?;
                if c.relu {
                    h = h.relu()?;
                }
            }
            taps.push(h.clone());
        }
        Ok(taps)
    }

    /// Per-sample distance, shape `(B,)`.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(Error::Shape(format!(
                "perceptual distance of mismatched shapes {:?} and {:?}",
                a.dims(),
                b.dims()
            )));
        }
        let batch = a.dims()[0];
        // One pass over the concatenated batch.
        let feats = self.features(&Tensor::cat(&[a, b], 0)?)?;
        let mut total: Option<Tensor> = None;
        for (f, lin) in feats.iter().zip(&self.lin) {
            let n = unit_normalize(f)?;
            let (fa, fb) = (n.narrow(0, 0, batch)?, n.narrow(0, batch, batch)?);
            let d = (fa - fb)?.sqr()?.broadcast_mul(lin)?.sum(1)?; // (B, H, W)
            let d = d.mean(D::Minus1)?.mean(D::Minus1)?;
            total = Some(match total {
                None => d,
                Some(t) => (t + d)?,
            });
        }
        total.ok_or_else(|| Error::Config("perceptual backbone has no stages".into()))
    }

    /// Batch-mean distance as a scalar tensor.
    pub fn distance_mean(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok(self.distance(a, b)?.mean_all()?)
    }
}

/// Divides each feature vector by its channel-wise L2 norm.
fn unit_normalize(f: &Tensor) -> Result<Tensor> {
    let norm = (f.sqr()?.sum_keepdim(1)? + 1e-10)?.sqrt()?;
    Ok(f.broadcast_div(&norm)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Image;

    fn img(seed: u64, size: usize) -> Tensor {
        let mut r = rng::seeded(seed);
        rng::normal_tensor(&mut r, (2, 3, size, size), &Device::Cpu, DType::F32).unwrap()
    }

    fn scalars(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
    }

    #[test]
    fn self_distance_is_exactly_zero() {
        let net = PerceptualNet::toy(0, &Device::Cpu, DType::F32).unwrap();
        let x = img(1, 16);
        assert!(scalars(&net.distance(&x, &x).unwrap()).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn symmetric_and_positive() {
        let net = PerceptualNet::toy(0, &Device::Cpu, DType::F32).unwrap();
        for s in 0..5 {
            let (a, b) = (img(s, 16), img(s + 100, 16));
            let ab = scalars(&net.distance(&a, &b).unwrap());
            let ba = scalars(&net.distance(&b, &a).unwrap());
            for (x, y) in ab.iter().zip(&ba) {
                assert!(*x > 0.0);
                assert!((x - y).abs() <= 1e-7, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = PerceptualNet::toy(0, &Device::Cpu, DType::F32).unwrap();
        assert!(net.distance(&img(0, 16), &img(0, 8)).is_err());
    }

    #[test]
    fn single_conv_on_2x2_matches_hand_computation() {
        // Two 1x1 output channels from a 2x2 kernel over 3 input channels,
        // evaluated on 2x2 images: one spatial position per channel.
        let dev = Device::Cpu;
        let wv: Vec<f64> = (0..24).map(|i| ((i as f64) * 0.3 - 3.0) / 4.0).collect();
        let weight = Tensor::from_slice(&wv, (2, 3, 2, 2), &dev).unwrap();
        let bias = Tensor::from_slice(&[0.1, -0.2], 2, &dev).unwrap();
        let lin = Tensor::from_slice(&[0.5, 2.0], 2, &dev).unwrap();
        let net = PerceptualNet::single_layer(weight, bias, lin).unwrap();

        let a = Image::from_fn(2, 2, |c, r, col| {
            [0.1, -0.4, 0.9][c] * (1.0 + r as f32) - 0.2 * col as f32
        });
        let b = Image::from_fn(2, 2, |c, r, col| 0.3 * c as f32 - 0.5 * r as f32 + 0.25 * col as f32);
        let d = scalars(
            &net.distance(
                &a.to_tensor(&dev, DType::F64).unwrap(),
                &b.to_tensor(&dev, DType::F64).unwrap(),
            )
            .unwrap(),
        )[0];

        let feat = |im: &Image| -> [f64; 2] {
            let mut out = [0.1, -0.2];
            for (o, v) in out.iter_mut().enumerate() {
                for c in 0..3 {
                    for r in 0..2 {
                        for col in 0..2 {
                            *v += wv[((o * 3 + c) * 2 + r) * 2 + col] * im.get(c, r, col) as f64;
                        }
                    }
                }
            }
            out
        };
        let norm = |f: [f64; 2]| {
            let n = (f[0] * f[0] + f[1] * f[1] + 1e-10).sqrt();
            [f[0] / n, f[1] / n]
        };
        let (fa, fb) = (norm(feat(&a)), norm(feat(&b)));
        let expected = 0.5 * (fa[0] - fb[0]).powi(2) + 2.0 * (fa[1] - fb[1]).powi(2);
        assert!((d - expected).abs() <= 1e-6, "{d} vs {expected}");
    }

    #[test]
    fn backbone_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = PerceptualNet::toy(3, &Device::Cpu, DType::F32).unwrap();
        net.save(dir.path().join("b.bin")).unwrap();
        let back = PerceptualNet::load(dir.path().join("b.bin"), &Device::Cpu, DType::F32).unwrap();
        let (a, b) = (img(1, 16), img(2, 16));
        assert_eq!(
            scalars(&net.distance(&a, &b).unwrap()),
            scalars(&back.distance(&a, &b).unwrap())
        );
    }
}
