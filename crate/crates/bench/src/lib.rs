//! Shared fixtures for the benchmarks in `benches/`.

use uncanny_core::generators::{Generator, GeneratorConfig, LatentWPlus, NoiseBundle};
use uncanny_core::{rng, DType, Device, Result};

/// A toy generator with a fixed latent and noise draw to synthesize from.
pub fn toy_generator(seed: u64) -> Result<(Generator, LatentWPlus, NoiseBundle)> {
    let g = Generator::new(GeneratorConfig::toy(), seed, &Device::Cpu, DType::F32)?;
    let ws = g.mean_wplus(256, seed)?;
    let noise = NoiseBundle::random(g.config(), 1, &mut rng::seeded(seed), &Device::Cpu, DType::F32)?;
    Ok((g, ws, noise))
}
