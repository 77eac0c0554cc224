//! Convolutional critic and the non-saturating logistic losses with R1.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};

use crate::error::{Error, Result};
use crate::generators::leaky_relu;
use crate::nn::conv2d;
use crate::params::ParamStore;
use crate::rng;
use crate::tensor_file::TensorFile;

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Anything that scores a `(B, 3, H, W)` batch with one logit per image.
pub trait Critic {
    /// Realness logits, shape `(B,)`. Differentiable with respect to `x`.
    fn score(&self, x: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    resolution: usize,
    channel_base: usize,
    channel_max: usize,
    params: ParamStore,
}

impl Discriminator {
    pub fn new(
        resolution: usize,
        channel_base: usize,
        channel_max: usize,
        seed: u64,
        device: &Device,
        dtype: DType,
    ) -> Result<Self> {
        if resolution < 4 || !resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "discriminator resolution must be a power of two >= 4, got {resolution}"
            )));
        }
        let ch = |r: usize| (channel_base / r).clamp(1, channel_max);
        let mut rng = rng::seeded(seed);
        let mut params = ParamStore::new();
        let mut randn = |shape: &[usize]| rng::normal_tensor(&mut rng, shape, device, dtype);
        let zeros = |n: usize| -> Result<Tensor> { Ok(Tensor::zeros(n, dtype, device)?) };

        params.insert("fromrgb.weight", randn(&[ch(resolution), 3, 1, 1])?)?;
        params.insert("fromrgb.bias", zeros(ch(resolution))?)?;
        let mut r = resolution;
        while r > 4 {
            let (cin, cout) = (ch(r), ch(r / 2));
            params.insert(format!("b{r}.conv0.weight"), randn(&[cin, cin, 3, 3])?)?;
            params.insert(format!("b{r}.conv0.bias"), zeros(cin)?)?;
            params.insert(format!("b{r}.conv1.weight"), randn(&[cout, cin, 3, 3])?)?;
            params.insert(format!("b{r}.conv1.bias"), zeros(cout)?)?;
            r /= 2;
        }
        let c4 = ch(4);
        params.insert("b4.conv.weight", randn(&[c4, c4, 3, 3])?)?;
        params.insert("b4.conv.bias", zeros(c4)?)?;
        params.insert("b4.fc.weight", randn(&[c4, c4 * 16])?)?;
        params.insert("b4.fc.bias", zeros(c4)?)?;
        params.insert("b4.out.weight", randn(&[1, c4])?)?;
        params.insert("b4.out.bias", zeros(1)?)?;
        Ok(Self {
            resolution,
            channel_base,
            channel_max,
            params,
        })
    }

    /// Default critic for a generator of the given resolution.
    pub fn toy(resolution: usize, seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        Self::new(resolution, 512, 128, seed, device, dtype)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    fn p(&self, name: &str) -> Result<Tensor> {
        Ok(self.params.var(name)?.as_tensor().clone())
    }

    fn conv(&self, x: &Tensor, prefix: &str, padding: usize) -> Result<Tensor> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let (cout, cin, k, _) = w.dims4()?;
        let gain = 1.0 / ((cin * k * k) as f64).sqrt();
        let b = self.p(&format!("{prefix}.bias"))?.reshape((1, cout, 1, 1))?;
        let y = conv2d(x, &(w * gain)?, padding)?.broadcast_add(&b)?;
        Ok((leaky_relu(&y)? * SQRT2)?)
    }

    fn dense(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let gain = 1.0 / (w.dims()[1] as f64).sqrt();
        Ok(x.matmul(&(w * gain)?.t()?)?
            .broadcast_add(&self.p(&format!("{prefix}.bias"))?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = TensorFile::new(
            "discriminator",
            serde_json::json!({
                "resolution": self.resolution,
                "channel_base": self.channel_base,
                "channel_max": self.channel_max,
            }),
        );
        self.params.push_arrays(&mut f, "")?;
        f.write(path)
    }

    pub fn load(path: impl AsRef<Path>, device: &Device, dtype: DType) -> Result<Self> {
        let f = TensorFile::read_kind(path, "discriminator")?;
        let get = |k: &str| -> Result<usize> {
            f.meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Config(format!("discriminator checkpoint lacks {k}")))
        };
        let d = Self::new(
            get("resolution")?,
            get("channel_base")?,
            get("channel_max")?,
            0,
            device,
            dtype,
        )?;
        d.params.load_arrays(&f, "")?;
        Ok(d)
    }
}

impl Critic for Discriminator {
    fn score(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        if h != self.resolution || w != self.resolution {
            return Err(Error::Shape(format!(
                "discriminator expects {r}x{r} input, got {h}x{w}",
                r = self.resolution
            )));
        }
        let mut y = self.conv(x, "fromrgb", 0)?;
        let mut r = self.resolution;
        while r > 4 {
            y = self.conv(&y, &format!("b{r}.conv0"), 1)?;
            y = self.conv(&y, &format!("b{r}.conv1"), 1)?;
            y = y.avg_pool2d(2)?;
            r /= 2;
        }
        y = self.conv(&y, "b4.conv", 1)?;
        let y = y.reshape((b, ()))?;
        let y = (leaky_relu(&self.dense(&y, "b4.fc")?)? * SQRT2)?;
        Ok(self.dense(&y, "b4.out")?.squeeze(1)?)
    }
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Loss values of one discriminator/generator evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialLosses {
    pub g_adv: f64,
    /// `softplus(D(fake)) + softplus(-D(real))`, batch mean.
    pub d_main: f64,
    /// `(gamma / 2) * E ||grad_x D(real)||^2`.
    pub r1: f64,
    pub d_loss: f64,
}

pub fn generator_adv_loss(critic: &dyn Critic, fake: &Tensor) -> Result<Tensor> {
    Ok(softplus(&critic.score(fake)?.neg()?)?.mean_all()?)
}

pub fn discriminator_main_loss(critic: &dyn Critic, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    if real.dims() != fake.dims() {
        return Err(Error::Shape(format!(
            "real batch {:?} vs fake batch {:?}",
            real.dims(),
            fake.dims()
        )));
    }
    let f = softplus(&critic.score(fake)?)?.mean_all()?;
    let r = softplus(&critic.score(real)?.neg()?)?.mean_all()?;
    Ok((f + r)?)
}

/// `grad_x sum_b D(x_b)`, detached.
pub fn input_gradient(critic: &dyn Critic, x: &Tensor) -> Result<Tensor> {
    let xv = Var::from_tensor(&x.detach())?;
    let grads = critic.score(xv.as_tensor())?.sum_all()?.backward()?;
    let g = grads
        .get(xv.as_tensor())
        .cloned()
        .unwrap_or(xv.as_tensor().zeros_like()?);
    Ok(g.detach())
}

/// `(gamma / 2) * mean_b ||g_b||^2` from per-sample input gradients.
pub fn r1_value(grad: &Tensor, gamma: f64) -> Result<f64> {
    let b = grad.dims()[0];
    let sq = grad.sqr()?.reshape((b, ()))?.sum(1)?.mean_all()?;
    Ok(gamma / 2.0 * sq.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Surrogate whose parameter gradient approximates that of the R1 penalty.
///
/// With `g = grad_x D(x)` held fixed, `grad_theta (1/2)||g||^2` is the
/// directional derivative of `grad_theta D` along `g`, taken here by a
/// central difference of step `eps`. Returns `(surrogate, r1 value)`.
pub fn r1_surrogate(critic: &dyn Critic, real: &Tensor, gamma: f64) -> Result<(Tensor, f64)> {
    let real = real.detach();
    let g = input_gradient(critic, &real)?;
    let r1 = r1_value(&g, gamma)?;
    let b = real.dims()[0];
    let gmax = g
        .sqr()?
        .reshape((b, ()))?
        .sum(1)?
        .sqrt()?
        .max(0)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    if gmax == 0.0 || gamma == 0.0 {
        return Ok((real.zeros_like()?.sum_all()?, r1));
    }
    // Largest perturbation norm that keeps the difference above rounding noise.
    let reach = if real.dtype() == DType::F64 { 1e-5 } else { 1e-2 };
    let eps = reach / gmax;
    let step = (&g * eps)?;
    let plus = critic.score(&(&real + &step)?)?.sum_all()?;
    let minus = critic.score(&(&real - &step)?)?.sum_all()?;
    let surrogate = ((plus - minus)? * (gamma / (b as f64 * 2.0 * eps)))?;
    Ok((surrogate, r1))
}

/// Evaluates all adversarial terms without updating anything.
pub fn adversarial_losses(
    critic: &dyn Critic,
    real: &Tensor,
    fake: &Tensor,
    r1_gamma: f64,
) -> Result<AdversarialLosses> {
    let scalar = |t: Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let g_adv = scalar(generator_adv_loss(critic, &fake.detach())?)?;
    let d_main = scalar(discriminator_main_loss(critic, &real.detach(), &fake.detach())?)?;
    let r1 = if r1_gamma == 0.0 {
        0.0
    } else {
        r1_value(&input_gradient(critic, real)?, r1_gamma)?
    };
    Ok(AdversarialLosses {
        g_adv,
        d_main,
        r1,
        d_loss: d_main + r1,
    })
}
