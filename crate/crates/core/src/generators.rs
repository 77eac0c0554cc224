//! Style-based generator (mapping network + modulated-convolution synthesis
//! with skip ToRGB aggregation) and the realistic/rendering generator pair.

use std::collections::BTreeSet;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::smooth_upsample2x;
use crate::nn::conv2d;
use crate::params::ParamStore;
use crate::rng::{self, SeededRng};
use crate::tensor_file::{NamedArray, TensorFile};

const SQRT2: f64 = std::f64::consts::SQRT_2;
const LRELU_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingActivation {
    LeakyRelu,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    pub mapping_lr_mul: f64,
    pub mapping_activation: MappingActivation,
    pub normalize_z: bool,
    /// Feature channels at resolution `r` are `min(channel_max, channel_base / r)`.
    pub channel_base: usize,
    pub channel_max: usize,
    /// Initial per-layer noise strength.
    pub noise_strength_init: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl GeneratorConfig {
    /// 64x64, 10 style rows, 128 channels at 4x4 halving per doubling.
    pub fn toy() -> Self {
        Self {
            resolution: 64,
            z_dim: 512,
            w_dim: 512,
            mapping_layers: 2,
            mapping_lr_mul: 0.01,
            mapping_activation: MappingActivation::LeakyRelu,
            normalize_z: true,
            channel_base: 512,
            channel_max: 128,
            noise_strength_init: 0.1,
        }
    }

    /// The full 1024x1024 layout (18 style rows, 8-layer mapping).
    pub fn full() -> Self {
        Self {
            resolution: 1024,
            mapping_layers: 8,
            channel_base: 32768,
            channel_max: 512,
            noise_strength_init: 0.0,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 4 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "generator resolution must be a power of two >= 4, got {}",
                self.resolution
            )));
        }
        if self.z_dim == 0 || self.w_dim == 0 || self.mapping_layers == 0 {
            return Err(Error::Config("latent sizes and mapping depth must be positive".into()));
        }
        if self.channels_at(self.resolution) == 0 {
            return Err(Error::Config("channel_base too small for resolution".into()));
        }
        Ok(())
    }

    pub fn channels_at(&self, res: usize) -> usize {
        (self.channel_base / res).min(self.channel_max)
    }

    pub fn log2_resolution(&self) -> usize {
        self.resolution.trailing_zeros() as usize
    }

    /// Rows of a W+ code: `2 * log2(resolution) - 2`.
    pub fn num_ws(&self) -> usize {
        2 * self.log2_resolution() - 2
    }

    /// Spatial size of every noise input, in layer order.
    pub fn noise_resolutions(&self) -> Vec<usize> {
        let mut out = vec![4];
        let mut r = 8;
        while r <= self.resolution {
            out.push(r);
            out.push(r);
            r *= 2;
        }
        out
    }
}

struct ConvSpec {
    name: String,
    in_ch: usize,
    out_ch: usize,
    upsample: bool,
    w_index: usize,
    noise_index: usize,
}

struct RgbSpec {
    name: String,
    in_ch: usize,
    w_index: usize,
}

struct BlockSpec {
    convs: Vec<ConvSpec>,
    torgb: RgbSpec,
}

fn plan(cfg: &GeneratorConfig) -> Vec<BlockSpec> {
    let mut blocks = Vec::new();
    let c4 = cfg.channels_at(4);
    blocks.push(BlockSpec {
        convs: vec![ConvSpec {
            name: "synthesis.b4.conv1".into(),
            in_ch: c4,
            out_ch: c4,
            upsample: false,
            w_index: 0,
            noise_index: 0,
        }],
        torgb: RgbSpec {
            name: "synthesis.b4.torgb".into(),
            in_ch: c4,
            w_index: 1,
        },
    });
    let mut res = 8;
    let mut k = 1;
    while res <= cfg.resolution {
        let (cin, cout) = (cfg.channels_at(res / 2), cfg.channels_at(res));
        blocks.push(BlockSpec {
            convs: vec![
                ConvSpec {
                    name: format!("synthesis.b{res}.conv0"),
                    in_ch: cin,
                    out_ch: cout,
                    upsample: true,
                    w_index: 2 * k - 1,
                    noise_index: 2 * k - 1,
                },
                ConvSpec {
                    name: format!("synthesis.b{res}.conv1"),
                    in_ch: cout,
                    out_ch: cout,
                    upsample: false,
                    w_index: 2 * k,
                    noise_index: 2 * k,
                },
            ],
            torgb: RgbSpec {
                name: format!("synthesis.b{res}.torgb"),
                in_ch: cout,
                w_index: 2 * k + 1,
            },
        });
        res *= 2;
        k += 1;
    }
    blocks
}

fn is_mapping_param(name: &str) -> bool {
    name.starts_with("mapping.")
}

fn is_torgb_param(name: &str) -> bool {
    name.contains(".torgb.")
}

pub(crate) fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * LRELU_SLOPE)?)?)
}

/// Latent codes `z`, shape `(B, z_dim)`.
#[derive(Debug, Clone)]
pub struct LatentZ(Tensor);

impl LatentZ {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::Shape(format!("z must be (B, z_dim), got {:?}", t.dims())));
        }
        Ok(Self(t))
    }

    pub fn sample(rng: &mut SeededRng, batch: usize, z_dim: usize, device: &Device, dtype: DType) -> Result<Self> {
        Ok(Self(rng::normal_tensor(rng, (batch, z_dim), device, dtype)?))
    }

    pub fn zeros(batch: usize, z_dim: usize, device: &Device, dtype: DType) -> Result<Self> {
        Ok(Self(Tensor::zeros((batch, z_dim), dtype, device)?))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dims()[0]
    }
}

/// Per-layer style codes, shape `(B, L, w_dim)`.
#[derive(Debug, Clone)]
pub struct LatentWPlus(Tensor);

impl LatentWPlus {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::Shape(format!("W+ must be (B, L, w_dim), got {:?}", t.dims())));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn num_layers(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn item(&self, i: usize) -> Result<LatentWPlus> {
        Ok(Self(self.0.narrow(0, i, 1)?))
    }

    pub fn detach(&self) -> LatentWPlus {
        Self(self.0.detach())
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.0.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
    }

    pub fn bit_eq(&self, other: &LatentWPlus) -> Result<bool> {
        if self.0.dims() != other.0.dims() {
            return Ok(false);
        }
        let a = self.0.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let b = other.0.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    /// Saves a single code as an `(L, w_dim)` float32 array.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        if self.batch() != 1 {
            return Err(Error::InvalidArgument("only single latents are written to disk".into()));
        }
        let rows = self.0.squeeze(0)?;
        let mut f = TensorFile::new(
            "latent_wplus",
            serde_json::json!({"num_layers": rows.dims()[0], "w_dim": rows.dims()[1]}),
        );
        f.push(NamedArray::from_tensor("wplus", &rows)?);
        f.write(path)
    }

    pub fn load(path: impl AsRef<Path>, device: &Device, dtype: DType) -> Result<Self> {
        let f = TensorFile::read_kind(path, "latent_wplus")?;
        let a = f.require("wplus")?;
        if a.shape.len() != 2 {
            return Err(Error::Shape(format!("latent array must be 2-D, got {:?}", a.shape)));
        }
        Ok(Self(a.to_tensor(device, dtype)?.unsqueeze(0)?))
    }
}

/// One noise map per synthesis convolution, each `(B or 1, 1, r, r)`.
#[derive(Debug, Clone)]
pub struct NoiseBundle {
    maps: Vec<Tensor>,
}

impl NoiseBundle {
    pub fn new(maps: Vec<Tensor>) -> Self {
        Self { maps }
    }

    pub fn random(
        cfg: &GeneratorConfig,
        batch: usize,
        rng: &mut SeededRng,
        device: &Device,
        dtype: DType,
    ) -> Result<Self> {
        let maps = cfg
            .noise_resolutions()
            .into_iter()
            .map(|r| rng::normal_tensor(rng, (batch, 1, r, r), device, dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { maps })
    }

    pub fn zeros(cfg: &GeneratorConfig, batch: usize, device: &Device, dtype: DType) -> Result<Self> {
        let maps = cfg
            .noise_resolutions()
            .into_iter()
            .map(|r| Ok(Tensor::zeros((batch, 1, r, r), dtype, device)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn detach(&self) -> Self {
        Self {
            maps: self.maps.iter().map(|m| m.detach()).collect(),
        }
    }

    pub fn validate(&self, cfg: &GeneratorConfig, batch: usize) -> Result<()> {
        let res = cfg.noise_resolutions();
        if res.len() != self.maps.len() {
            return Err(Error::Shape(format!(
                "noise bundle has {} maps, generator expects {}",
                self.maps.len(),
                res.len()
            )));
        }
        for (i, (m, r)) in self.maps.iter().zip(res).enumerate() {
            let (b, c, h, w) = m.dims4()?;
            if c != 1 || h != r || w != r || (b != 1 && b != batch) {
                return Err(Error::Shape(format!(
                    "noise map {i} has shape {:?}, expected (1|{batch}, 1, {r}, {r})",
                    m.dims()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = TensorFile::new("noise_bundle", serde_json::json!({"maps": self.maps.len()}));
        for (i, m) in self.maps.iter().enumerate() {
            f.push(NamedArray::from_tensor(format!("noise.{i}"), m)?);
        }
        f.write(path)
    }

    pub fn load(path: impl AsRef<Path>, device: &Device, dtype: DType) -> Result<Self> {
        let f = TensorFile::read_kind(path, "noise_bundle")?;
        let maps = (0..f.arrays.len())
            .map(|i| f.require(&format!("noise.{i}"))?.to_tensor(device, dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { maps })
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
    frozen: BTreeSet<String>,
    requires_grad: bool,
    device: Device,
    dtype: DType,
}

impl Generator {
    /// Freshly initialized generator; every parameter trainable.
    pub fn new(config: GeneratorConfig, seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let mut params = ParamStore::new();
        let randn = |rng: &mut SeededRng, shape: &[usize], scale: f64| -> Result<Tensor> {
            Ok((rng::normal_tensor(rng, shape, device, dtype)? * scale)?)
        };
        let full = |shape: &[usize], v: f64| -> Result<Tensor> { Ok((Tensor::ones(shape, dtype, device)? * v)?) };

        let mut in_dim = config.z_dim;
        for i in 0..config.mapping_layers {
            params.insert(
                format!("mapping.fc{i}.weight"),
                randn(&mut rng, &[config.w_dim, in_dim], 1.0 / config.mapping_lr_mul)?,
            )?;
            params.insert(format!("mapping.fc{i}.bias"), full(&[config.w_dim], 0.0)?)?;
            in_dim = config.w_dim;
        }

        let c4 = config.channels_at(4);
        params.insert("synthesis.b4.const", randn(&mut rng, &[c4, 4, 4], 1.0)?)?;
        for block in plan(&config) {
            for conv in &block.convs {
                params.insert(
                    format!("{}.affine.weight", conv.name),
                    randn(&mut rng, &[conv.in_ch, config.w_dim], 1.0)?,
                )?;
                params.insert(format!("{}.affine.bias", conv.name), full(&[conv.in_ch], 1.0)?)?;
                params.insert(
                    format!("{}.weight", conv.name),
                    randn(&mut rng, &[conv.out_ch, conv.in_ch, 3, 3], 1.0)?,
                )?;
                params.insert(format!("{}.bias", conv.name), full(&[conv.out_ch], 0.0)?)?;
                params.insert(
                    format!("{}.noise_strength", conv.name),
                    full(&[1], config.noise_strength_init)?,
                )?;
            }
            let rgb = &block.torgb;
            params.insert(
                format!("{}.affine.weight", rgb.name),
                randn(&mut rng, &[rgb.in_ch, config.w_dim], 1.0)?,
            )?;
            params.insert(format!("{}.affine.bias", rgb.name), full(&[rgb.in_ch], 1.0)?)?;
            params.insert(
                format!("{}.weight", rgb.name),
                randn(&mut rng, &[3, rgb.in_ch, 1, 1], 1.0)?,
            )?;
            params.insert(format!("{}.bias", rgb.name), full(&[3], 0.0)?)?;
        }

        Ok(Self {
            config,
            params,
            frozen: BTreeSet::new(),
            requires_grad: true,
            device: device.clone(),
            dtype,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn num_ws(&self) -> usize {
        self.config.num_ws()
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Frozen parameter names in sorted order.
    pub fn frozen_parameters(&self) -> Vec<String> {
        self.frozen.iter().cloned().collect()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Variables that receive optimizer updates.
    pub fn trainable_vars(&self) -> Vec<(String, candle_core::Var)> {
        if !self.requires_grad {
            return Vec::new();
        }
        self.params
            .iter()
            .filter(|(n, _)| !self.frozen.contains(*n))
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect()
    }

    pub fn mapping_parameter_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| is_mapping_param(n))
            .map(String::from)
            .collect()
    }

    pub fn torgb_parameter_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| is_torgb_param(n))
            .map(String::from)
            .collect()
    }

    pub fn frozen_checksum(&self) -> Result<String> {
        self.params.checksum(self.frozen.iter().map(|s| s.as_str()))
    }

    /// Digest of every parameter.
    pub fn weights_checksum(&self) -> Result<String> {
        self.params.checksum_all()
    }

    /// Same weights in another precision (used by gradient checks).
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            params: self.params.to_dtype(dtype)?,
            dtype,
            ..self.clone()
        })
    }

    fn p(&self, name: &str, track: bool) -> Result<Tensor> {
        let v = self.params.var(name)?;
        if track && self.requires_grad && !self.frozen.contains(name) {
            Ok(v.as_tensor().clone())
        } else {
            Ok(v.as_detached_tensor())
        }
    }

    /// `z -> w`, shape `(B, w_dim)`.
    pub fn map_to_w(&self, z: &LatentZ) -> Result<Tensor> {
        let cfg = &self.config;
        let mut x = z.tensor().to_dtype(self.dtype)?;
        if x.dims()[1] != cfg.z_dim {
            return Err(Error::Shape(format!(
                "z has {} dims, expected {}",
                x.dims()[1],
                cfg.z_dim
            )));
        }
        if cfg.normalize_z {
            let norm = (x.sqr()?.mean_keepdim(1)? + 1e-8)?.sqrt()?;
            x = x.broadcast_div(&norm)?;
        }
        let mut in_dim = cfg.z_dim;
        for i in 0..cfg.mapping_layers {
            let w = self.p(&format!("mapping.fc{i}.weight"), true)?;
            let b = self.p(&format!("mapping.fc{i}.bias"), true)?;
            let gain = cfg.mapping_lr_mul / (in_dim as f64).sqrt();
            x = x.matmul(&(w * gain)?.t()?)?.broadcast_add(&(b * cfg.mapping_lr_mul)?)?;
            if cfg.mapping_activation == MappingActivation::LeakyRelu {
                x = (leaky_relu(&x)? * SQRT2)?;
            }
            in_dim = cfg.w_dim;
        }
        Ok(x)
    }

    /// Maps `z` and repeats the single `w` row across all style inputs.
    pub fn map_to_wplus(&self, z: &LatentZ) -> Result<LatentWPlus> {
        let w = self.map_to_w(z)?;
        let (b, d) = w.dims2()?;
        LatentWPlus::new(w.unsqueeze(1)?.broadcast_as((b, self.num_ws(), d))?.contiguous()?)
    }

    /// Average W+ code over `n_samples` standard-normal draws of `z`.
    pub fn mean_wplus(&self, n_samples: usize, seed: u64) -> Result<LatentWPlus> {
        if n_samples == 0 {
            return Err(Error::InvalidArgument("mean_wplus needs at least one sample".into()));
        }
        const CHUNK: usize = 2048;
        let mut rng = rng::seeded(seed);
        let mut acc = vec![0f64; self.config.w_dim];
        let mut remaining = n_samples;
        while remaining > 0 {
            let n = remaining.min(CHUNK);
            let z = LatentZ::sample(&mut rng, n, self.config.z_dim, &self.device, self.dtype)?;
            let w = self.map_to_w(&z)?.to_dtype(DType::F64)?.sum(0)?.to_vec1::<f64>()?;
            for (a, v) in acc.iter_mut().zip(w) {
                *a += v;
            }
            remaining -= n;
        }
        let mean: Vec<f64> = acc.into_iter().map(|v| v / n_samples as f64).collect();
        let w = Tensor::from_vec(mean, (1, 1, self.config.w_dim), &self.device)?.to_dtype(self.dtype)?;
        LatentWPlus::new(w.broadcast_as((1, self.num_ws(), self.config.w_dim))?.contiguous()?)
    }

    /// Renders `(B, 3, R, R)`; trainable parameters stay on the tape.
    pub fn synthesize(&self, ws: &LatentWPlus, noise: &NoiseBundle) -> Result<Tensor> {
        self.synthesize_impl(ws, noise, true)
    }

    /// Renders with every generator weight detached (gradients can still flow
    /// to `ws` and `noise`).
    pub fn synthesize_frozen(&self, ws: &LatentWPlus, noise: &NoiseBundle) -> Result<Tensor> {
        self.synthesize_impl(ws, noise, false)
    }

    fn synthesize_impl(&self, ws: &LatentWPlus, noise: &NoiseBundle, track: bool) -> Result<Tensor> {
        let cfg = &self.config;
        let ws_t = ws.tensor();
        let (b, l, d) = ws_t.dims3()?;
        if l != cfg.num_ws() || d != cfg.w_dim {
            return Err(Error::Shape(format!(
                "W+ is ({l}, {d}), generator expects ({}, {})",
                cfg.num_ws(),
                cfg.w_dim
            )));
        }
        noise.validate(cfg, b)?;
        let w_row = |i: usize| -> Result<Tensor> { Ok(ws_t.narrow(1, i, 1)?.squeeze(1)?.to_dtype(self.dtype)?) };

        let c4 = cfg.channels_at(4);
        let mut x = self
            .p("synthesis.b4.const", track)?
            .unsqueeze(0)?
            .broadcast_as((b, c4, 4, 4))?;
        let mut img: Option<Tensor> = None;
        for block in plan(cfg) {
            for conv in &block.convs {
                if conv.upsample {
                    x = upsample2x(&x)?;
                }
                x = self.modulated_layer(&x, &w_row(conv.w_index)?, conv, &noise.maps[conv.noise_index], track)?;
            }
            let rgb = self.torgb(&x, &w_row(block.torgb.w_index)?, &block.torgb, track)?;
            img = Some(match img {
                None => rgb,
                Some(prev) => (upsample2x(&prev)? + rgb)?,
            });
        }
        img.ok_or_else(|| Error::Shape("empty synthesis plan".into()))
    }

    fn style(&self, w: &Tensor, prefix: &str, track: bool) -> Result<Tensor> {
        let a = self.p(&format!("{prefix}.affine.weight"), track)?;
        let bias = self.p(&format!("{prefix}.affine.bias"), track)?;
        let gain = 1.0 / (self.config.w_dim as f64).sqrt();
        Ok(w.matmul(&(a * gain)?.t()?)?.broadcast_add(&bias)?)
    }

    fn modulated_layer(&self, x: &Tensor, w: &Tensor, spec: &ConvSpec, noise: &Tensor, track: bool) -> Result<Tensor> {
        let (b, cin, _, _) = x.dims4()?;
        let s = self.style(w, &spec.name, track)?; // (B, Cin)
        let weight = (self.p(&format!("{}.weight", spec.name), track)? * (1.0 / ((cin * 9) as f64).sqrt()))?;
        let y = conv2d(&x.broadcast_mul(&s.reshape((b, cin, 1, 1))?)?, &weight, 1)?;
        // Demodulation: 1 / sqrt(sum_{i,k} (W_oik * s_i)^2).
        let w2 = weight.sqr()?.sum(D::Minus1)?.sum(D::Minus1)?; // (Cout, Cin)
        let demod = (s.sqr()?.matmul(&w2.t()?)? + 1e-8)?.sqrt()?.recip()?; // (B, Cout)
        let y = y.broadcast_mul(&demod.reshape((b, spec.out_ch, 1, 1))?)?;
        let strength = self
            .p(&format!("{}.noise_strength", spec.name), track)?
            .reshape((1, 1, 1, 1))?;
        let y = y.broadcast_add(&noise.to_dtype(self.dtype)?.broadcast_mul(&strength)?)?;
        let bias = self
            .p(&format!("{}.bias", spec.name), track)?
            .reshape((1, spec.out_ch, 1, 1))?;
        Ok((leaky_relu(&y.broadcast_add(&bias)?)? * SQRT2)?)
    }

    fn torgb(&self, x: &Tensor, w: &Tensor, spec: &RgbSpec, track: bool) -> Result<Tensor> {
        let (b, cin, _, _) = x.dims4()?;
        let s = (self.style(w, &spec.name, track)? * (1.0 / (cin as f64).sqrt()))?;
        let weight = self.p(&format!("{}.weight", spec.name), track)?;
        let y = conv2d(&x.broadcast_mul(&s.reshape((b, cin, 1, 1))?)?, &weight, 0)?;
        let bias = self.p(&format!("{}.bias", spec.name), track)?.reshape((1, 3, 1, 1))?;
        Ok(y.broadcast_add(&bias)?)
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut f = TensorFile::new(
            "generator",
            serde_json::json!({
                "resolution": self.config.resolution,
                "config": self.config,
                "frozen": self.frozen_parameters(),
            }),
        );
        self.params.push_arrays(&mut f, "")?;
        Ok(f)
    }

    pub fn from_tensor_file(f: &TensorFile, device: &Device, dtype: DType) -> Result<Self> {
        let config: GeneratorConfig = serde_json::from_value(f.meta["config"].clone())?;
        let mut g = Generator::new(config, 0, device, dtype)?;
        g.params.load_arrays(f, "")?;
        g.frozen = frozen_from_meta(&f.meta["frozen"], &g.params)?;
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tensor_file()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>, device: &Device, dtype: DType) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read_kind(path, "generator")?, device, dtype)
    }
}

fn frozen_from_meta(v: &serde_json::Value, params: &ParamStore) -> Result<BTreeSet<String>> {
    let names: Vec<String> = serde_json::from_value(v.clone())?;
    for n in &names {
        params.var(n)?;
    }
    Ok(names.into_iter().collect())
}

/// Nearest 2x followed by a `[1, 2, 1] / 4` smoothing pass.
fn upsample2x(x: &Tensor) -> Result<Tensor> {
    smooth_upsample2x(x)
}

/// The realistic generator and its rendering-style clone. The clone shares the
/// realistic generator's mapping network variables; its mapping and ToRGB
/// parameters are frozen.
#[derive(Debug, Clone)]
pub struct GeneratorPair {
    pub g_real: Generator,
    pub g_rendering: Generator,
}

/// Builds the fine-tuning pair from a pretrained realistic generator.
pub fn clone_for_finetune(g_real: &Generator) -> Result<GeneratorPair> {
    let mut real = g_real.clone();
    real.requires_grad = false;

    let mut params = ParamStore::new();
    let mut frozen = BTreeSet::new();
    for (name, var) in g_real.params.iter() {
        if is_mapping_param(name) {
            params.insert_shared(name, var.clone());
        } else {
            params.insert(name, var.as_detached_tensor())?;
        }
        if is_mapping_param(name) || is_torgb_param(name) {
            frozen.insert(name.to_string());
        }
    }
    let rendering = Generator {
        config: g_real.config.clone(),
        params,
        frozen,
        requires_grad: true,
        device: g_real.device.clone(),
        dtype: g_real.dtype,
    };
    Ok(GeneratorPair {
        g_real: real,
        g_rendering: rendering,
    })
}

impl GeneratorPair {
    pub fn resolution(&self) -> usize {
        self.g_real.resolution()
    }

    /// The mapping network is common to both generators.
    pub fn shared_mapping(&self) -> bool {
        self.g_real.mapping_parameter_names().iter().all(|n| {
            match (self.g_real.params.var(n), self.g_rendering.params.var(n)) {
                (Ok(a), Ok(b)) => a.as_tensor().id() == b.as_tensor().id(),
                _ => false,
            }
        })
    }

    /// Checks that mapping and ToRGB parameters of the clone are bit-identical
    /// to the realistic generator's.
    pub fn verify_invariants(&self) -> Result<()> {
        let mut names = self.g_real.mapping_parameter_names();
        names.extend(self.g_real.torgb_parameter_names());
        let a = self.g_real.params.checksum(names.iter().map(|s| s.as_str()))?;
        let b = self.g_rendering.params.checksum(names.iter().map(|s| s.as_str()))?;
        if a != b {
            return Err(Error::Integrity(
                "rendering generator's mapping/ToRGB parameters diverged from the realistic generator".into(),
            ));
        }
        Ok(())
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let g_real = self.g_real.to_dtype(dtype)?;
        let mut g_rendering = self.g_rendering.to_dtype(dtype)?;
        for n in g_real.mapping_parameter_names() {
            g_rendering
                .params
                .insert_shared(n.clone(), g_real.params.var(&n)?.clone());
        }
        Ok(Self { g_real, g_rendering })
    }

    /// Pair checkpoint: the mapping network is stored once under `shared/`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = TensorFile::new(
            "generator_pair",
            serde_json::json!({
                "resolution": self.resolution(),
                "config": self.g_real.config,
                "frozen_real": self.g_real.frozen_parameters(),
                "frozen_rendering": self.g_rendering.frozen_parameters(),
            }),
        );
        for (name, var) in self.g_real.params.iter() {
            let prefix = if is_mapping_param(name) { "shared/" } else { "real/" };
            f.push(NamedArray::from_tensor(format!("{prefix}{name}"), var.as_tensor())?);
        }
        for (name, var) in self.g_rendering.params.iter() {
            if !is_mapping_param(name) {
                f.push(NamedArray::from_tensor(format!("rendering/{name}"), var.as_tensor())?);
            }
        }
        f.write(path)
    }

    /// Fails with [`Error::Integrity`] if the stored ToRGB parameters differ
    /// between the two generators.
    pub fn load(path: impl AsRef<Path>, device: &Device, dtype: DType) -> Result<Self> {
        let f = TensorFile::read_kind(path, "generator_pair")?;
        let config: GeneratorConfig = serde_json::from_value(f.meta["config"].clone())?;
        let base = Generator::new(config, 0, device, dtype)?;
        let mut pair = clone_for_finetune(&base)?;
        for (name, var) in pair.g_real.params.iter() {
            let key = if is_mapping_param(name) {
                format!("shared/{name}")
            } else {
                format!("real/{name}")
            };
            var.set(&f.require(&key)?.to_tensor(device, dtype)?)?;
        }
        for (name, var) in pair.g_rendering.params.iter() {
            if !is_mapping_param(name) {
                var.set(&f.require(&format!("rendering/{name}"))?.to_tensor(device, dtype)?)?;
            }
        }
        pair.g_real.frozen = frozen_from_meta(&f.meta["frozen_real"], &pair.g_real.params)?;
        pair.g_rendering.frozen = frozen_from_meta(&f.meta["frozen_rendering"], &pair.g_rendering.params)?;
        pair.verify_invariants()?;
        Ok(pair)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

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

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn style_row_counts() {
        assert_eq!(GeneratorConfig::toy().num_ws(), 10);
        assert_eq!(GeneratorConfig::full().num_ws(), 18);
        assert_eq!(GeneratorConfig::toy().noise_resolutions().len(), 9);
        assert_eq!(GeneratorConfig::toy().channels_at(4), 128);
        assert_eq!(GeneratorConfig::toy().channels_at(64), 8);
        assert_eq!(GeneratorConfig::full().channels_at(1024), 32);
    }

    #[test]
    fn output_shape_and_determinism() {
        let g = Generator::new(small_cfg(), 1, &Device::Cpu, DType::F32).unwrap();
        let mut rng = rng::seeded(4);
        let z = LatentZ::sample(&mut rng, 2, 32, &Device::Cpu, DType::F32).unwrap();
        let ws = g.map_to_wplus(&z).unwrap();
        assert_eq!(ws.tensor().dims(), &[2, 6, 32]);
        let n = NoiseBundle::random(g.config(), 2, &mut rng, &Device::Cpu, DType::F32).unwrap();
        let a = g.synthesize(&ws, &n).unwrap();
        let b = g.synthesize(&ws, &n).unwrap();
        assert_eq!(a.dims(), &[2, 3, 16, 16]);
        assert_eq!(max_diff(&a, &b), 0.0);
    }

    #[test]
    fn zero_z_is_deterministic() {
        let g = Generator::new(small_cfg(), 1, &Device::Cpu, DType::F32).unwrap();
        let z = LatentZ::zeros(1, 32, &Device::Cpu, DType::F32).unwrap();
        let a = g.map_to_wplus(&z).unwrap();
        let b = g.map_to_wplus(&z).unwrap();
        assert!(a.bit_eq(&b).unwrap());
    }

    #[test]
    fn hand_set_two_layer_mapping_matches_manual_forward() {
        let cfg = GeneratorConfig {
            z_dim: 2,
            w_dim: 2,
            mapping_layers: 2,
            mapping_lr_mul: 1.0,
            normalize_z: false,
            ..small_cfg()
        };
        let g = Generator::new(cfg, 0, &Device::Cpu, DType::F64).unwrap();
        let set = |n: &str, v: &[f64], shape: &[usize]| {
            g.params
                .var(n)
                .unwrap()
                .set(&Tensor::from_slice(v, shape, &Device::Cpu).unwrap())
                .unwrap();
        };
        let w0 = [1.0, -2.0, 0.5, 3.0];
        let b0 = [0.1, -0.2];
        let w1 = [2.0, 1.0, -1.0, 0.25];
        let b1 = [0.0, 0.3];
        set("mapping.fc0.weight", &w0, &[2, 2]);
        set("mapping.fc0.bias", &b0, &[2]);
        set("mapping.fc1.weight", &w1, &[2, 2]);
        set("mapping.fc1.bias", &b1, &[2]);
        let z = [0.7, -0.4];
        let out = g
            .map_to_w(&LatentZ::new(Tensor::from_slice(&z, (1, 2), &Device::Cpu).unwrap()).unwrap())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        // Manual forward: equalized gain 1/sqrt(2), lrelu(0.2) * sqrt(2).
        let lrelu = |v: f64| if v > 0.0 { v } else { 0.2 * v } * std::f64::consts::SQRT_2;
        let g0 = 1.0 / 2f64.sqrt();
        let h: Vec<f64> = (0..2)
            .map(|o| lrelu(g0 * (w0[2 * o] * z[0] + w0[2 * o + 1] * z[1]) + b0[o]))
            .collect();
        let y: Vec<f64> = (0..2)
            .map(|o| lrelu(g0 * (w1[2 * o] * h[0] + w1[2 * o + 1] * h[1]) + b1[o]))
            .collect();
        for (a, b) in out.iter().zip(&y) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn single_block_modulation_matches_closed_form() {
        // 4x4 generator: one modulated conv + one ToRGB. With identity-centre
        // kernels, zero noise strength and a hand-set style the output has a
        // closed form.
        let cfg = GeneratorConfig {
            resolution: 4,
            z_dim: 2,
            w_dim: 2,
            channel_base: 8,
            channel_max: 2,
            noise_strength_init: 0.0,
            ..small_cfg()
        };
        let dev = Device::Cpu;
        let g = Generator::new(cfg, 0, &dev, DType::F64).unwrap();
        let set = |n: &str, t: Tensor| g.params.var(n).unwrap().set(&t).unwrap();
        let konst: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        set(
            "synthesis.b4.const",
            Tensor::from_slice(&konst, (2, 4, 4), &dev).unwrap(),
        );
        let mut k = vec![0.0f64; 2 * 2 * 9];
        k[4] = 2.0; // out0 <- in0 centre
        k[3 * 9 + 4] = -1.5; // out1 <- in1 centre
        set(
            "synthesis.b4.conv1.weight",
            Tensor::from_slice(&k, (2, 2, 3, 3), &dev).unwrap(),
        );
        set(
            "synthesis.b4.conv1.bias",
            Tensor::from_slice(&[0.1, -0.3], 2, &dev).unwrap(),
        );
        set(
            "synthesis.b4.conv1.affine.weight",
            Tensor::zeros((2, 2), DType::F64, &dev).unwrap(),
        );
        set(
            "synthesis.b4.conv1.affine.bias",
            Tensor::from_slice(&[3.0, 0.5], 2, &dev).unwrap(),
        );
        set(
            "synthesis.b4.torgb.affine.weight",
            Tensor::zeros((2, 2), DType::F64, &dev).unwrap(),
        );
        set(
            "synthesis.b4.torgb.affine.bias",
            Tensor::from_slice(&[1.0, 2.0], 2, &dev).unwrap(),
        );
        let rgb_w = [1.0, 0.0, 0.0, 1.0, 0.5, -0.5];
        set(
            "synthesis.b4.torgb.weight",
            Tensor::from_slice(&rgb_w, (3, 2, 1, 1), &dev).unwrap(),
        );
        set(
            "synthesis.b4.torgb.bias",
            Tensor::from_slice(&[0.0, 0.1, 0.2], 3, &dev).unwrap(),
        );

        let ws = LatentWPlus::new(Tensor::zeros((1, 2, 2), DType::F64, &dev).unwrap()).unwrap();
        let noise = NoiseBundle::zeros(g.config(), 1, &dev, DType::F64).unwrap();
        let out = g
            .synthesize(&ws, &noise)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();

        // Modulated identity conv with demodulation: out_o = x_o * s_o * k_o / |k_o * s_o| = sign(k_o) x_o.
        let sign = [1.0, -1.0];
        let lrelu = |v: f64| if v > 0.0 { v } else { 0.2 * v } * std::f64::consts::SQRT_2;
        let s_rgb = [1.0 / 2f64.sqrt(), 2.0 / 2f64.sqrt()];
        for c in 0..3 {
            for p in 0..16 {
                let h: Vec<f64> = (0..2)
                    .map(|o| lrelu(sign[o] * konst[o * 16 + p] + [0.1, -0.3][o]))
                    .collect();
                let expected = rgb_w[2 * c] * s_rgb[0] * h[0] + rgb_w[2 * c + 1] * s_rgb[1] * h[1] + [0.0, 0.1, 0.2][c];
                assert!(
                    (out[c * 16 + p] - expected).abs() < 1e-5,
                    "c{c} p{p}: {} vs {expected}",
                    out[c * 16 + p]
                );
            }
        }
    }

    #[test]
    fn clone_freezes_mapping_and_torgb_and_preserves_output() {
        let g = Generator::new(small_cfg(), 3, &Device::Cpu, DType::F32).unwrap();
        assert!(g.frozen_parameters().is_empty());
        let pair = clone_for_finetune(&g).unwrap();
        assert!(pair.shared_mapping());
        assert_eq!(pair.g_rendering.parameter_count(), pair.g_real.parameter_count());
        let frozen: BTreeSet<String> = pair.g_rendering.frozen_parameters().into_iter().collect();
        let mut expected: BTreeSet<String> = g.mapping_parameter_names().into_iter().collect();
        expected.extend(g.torgb_parameter_names());
        assert_eq!(frozen, expected);
        assert!(frozen.iter().any(|n| n.starts_with("mapping.fc0")));

        let mut rng = rng::seeded(8);
        let z = LatentZ::sample(&mut rng, 3, 32, &Device::Cpu, DType::F32).unwrap();
        let wa = pair.g_real.map_to_wplus(&z).unwrap();
        let wb = pair.g_rendering.map_to_wplus(&z).unwrap();
        assert!(wa.bit_eq(&wb).unwrap());
        let n = NoiseBundle::random(g.config(), 3, &mut rng, &Device::Cpu, DType::F32).unwrap();
        let a = pair.g_real.synthesize(&wa, &n).unwrap();
        let b = pair.g_rendering.synthesize(&wa, &n).unwrap();
        assert!(max_diff(&a, &b) <= 1e-6);
        pair.verify_invariants().unwrap();
    }

    #[test]
    fn clone_synthesis_weights_are_independent() {
        let g = Generator::new(small_cfg(), 3, &Device::Cpu, DType::F32).unwrap();
        let pair = clone_for_finetune(&g).unwrap();
        let name = "synthesis.b8.conv0.weight";
        let v = pair.g_rendering.params().var(name).unwrap();
        v.set(&(v.as_detached_tensor() + 1.0).unwrap()).unwrap();
        let before = g.params().checksum([name]).unwrap();
        assert_eq!(pair.g_real.params().checksum([name]).unwrap(), before);
        assert_ne!(pair.g_rendering.params().checksum([name]).unwrap(), before);
    }

    #[test]
    fn mean_wplus_single_sample_and_seed_determinism() {
        let g = Generator::new(small_cfg(), 5, &Device::Cpu, DType::F32).unwrap();
        let mut rng = rng::seeded(77);
        let z = LatentZ::sample(&mut rng, 1, 32, &Device::Cpu, DType::F32).unwrap();
        let direct = g.map_to_wplus(&z).unwrap();
        let mean = g.mean_wplus(1, 77).unwrap();
        assert!(mean.bit_eq(&direct).unwrap());
        assert!(g
            .mean_wplus(50, 9)
            .unwrap()
            .bit_eq(&g.mean_wplus(50, 9).unwrap())
            .unwrap());
    }

    #[test]
    fn mean_wplus_of_linear_mapping_converges_to_bias() {
        let cfg = GeneratorConfig {
            z_dim: 8,
            w_dim: 8,
            mapping_layers: 1,
            mapping_lr_mul: 1.0,
            mapping_activation: MappingActivation::Linear,
            normalize_z: false,
            ..small_cfg()
        };
        let g = Generator::new(cfg, 2, &Device::Cpu, DType::F64).unwrap();
        let bias: Vec<f64> = (0..8).map(|i| i as f64 * 0.25 - 1.0).collect();
        g.params
            .var("mapping.fc0.bias")
            .unwrap()
            .set(&Tensor::from_slice(&bias, 8, &Device::Cpu).unwrap())
            .unwrap();
        let weight = g.params.var("mapping.fc0.weight").unwrap().as_detached_tensor();
        // Per-output std of w = gain * ||row||, gain = 1/sqrt(8).
        let row_norms = weight
            .sqr()
            .unwrap()
            .sum(1)
            .unwrap()
            .sqrt()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let n = 100_000usize;
        let mean = g.mean_wplus(n, 123).unwrap();
        let row0 = mean
            .tensor()
            .narrow(1, 0, 1)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for i in 0..8 {
            let se = row_norms[i] / 8f64.sqrt() / (n as f64).sqrt();
            assert!(
                (row0[i] - bias[i]).abs() <= 3.0 * se,
                "dim {i}: {} vs {} (se {se})",
                row0[i],
                bias[i]
            );
        }
        // Every row of the broadcast code is identical.
        let last = mean
            .tensor()
            .narrow(1, 5, 1)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(row0, last);
    }

    #[test]
    fn rejects_bad_shapes() {
        let g = Generator::new(small_cfg(), 1, &Device::Cpu, DType::F32).unwrap();
        let ws = LatentWPlus::new(Tensor::zeros((1, 5, 32), DType::F32, &Device::Cpu).unwrap()).unwrap();
        let n = NoiseBundle::zeros(g.config(), 1, &Device::Cpu, DType::F32).unwrap();
        assert!(g.synthesize(&ws, &n).is_err());
        let ws = g.mean_wplus(2, 0).unwrap();
        let short = NoiseBundle::new(n.maps()[..3].to_vec());
        assert!(g.synthesize(&ws, &short).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let g = Generator::new(small_cfg(), 11, &Device::Cpu, DType::F32).unwrap();
        let pair = clone_for_finetune(&g).unwrap();
        let p = dir.path().join("g.ckpt");
        pair.g_rendering.save(&p).unwrap();
        let back = Generator::load(&p, &Device::Cpu, DType::F32).unwrap();
        assert_eq!(back.frozen_parameters(), pair.g_rendering.frozen_parameters());
        let ws = g.mean_wplus(4, 1).unwrap();
        let mut rng = rng::seeded(2);
        let n = NoiseBundle::random(g.config(), 1, &mut rng, &Device::Cpu, DType::F32).unwrap();
        let a = pair.g_rendering.synthesize(&ws, &n).unwrap();
        let b = back.synthesize(&ws, &n).unwrap();
        assert_eq!(max_diff(&a, &b), 0.0);

        let pp = dir.path().join("pair.ckpt");
        pair.save(&pp).unwrap();
        let pair2 = GeneratorPair::load(&pp, &Device::Cpu, DType::F32).unwrap();
        assert!(pair2.shared_mapping());
        assert_eq!(
            pair2.g_rendering.frozen_parameters(),
            pair.g_rendering.frozen_parameters()
        );
        assert_eq!(
            max_diff(
                &pair2.g_real.synthesize(&ws, &n).unwrap(),
                &pair.g_real.synthesize(&ws, &n).unwrap()
            ),
            0.0
        );
    }

    #[test]
    fn latent_and_noise_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Generator::new(small_cfg(), 11, &Device::Cpu, DType::F32).unwrap();
        let ws = g.mean_wplus(3, 4).unwrap();
        ws.save(dir.path().join("w.lat")).unwrap();
        let back = LatentWPlus::load(dir.path().join("w.lat"), &Device::Cpu, DType::F32).unwrap();
        assert!(back.bit_eq(&ws).unwrap());
        let mut rng = rng::seeded(2);
        let n = NoiseBundle::random(g.config(), 1, &mut rng, &Device::Cpu, DType::F32).unwrap();
        n.save(dir.path().join("n.bin")).unwrap();
        let n2 = NoiseBundle::load(dir.path().join("n.bin"), &Device::Cpu, DType::F32).unwrap();
        assert_eq!(
            max_diff(&g.synthesize(&ws, &n).unwrap(), &g.synthesize(&back, &n2).unwrap()),
            0.0
        );
    }
}
