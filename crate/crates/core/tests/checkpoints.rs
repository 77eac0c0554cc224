use std::path::Path;

use uncanny_core::generators::{
    clone_for_finetune, Generator, GeneratorConfig, GeneratorPair, LatentWPlus, NoiseBundle,
};
use uncanny_core::rng;
use uncanny_core::tensor_file::{TensorFile, FORMAT_VERSION, MAGIC};
use uncanny_core::{DType, Device, Error, Tensor};

fn small() -> GeneratorConfig {
    GeneratorConfig {
        resolution: 16,
        z_dim: 32,
        w_dim: 32,
        channel_base: 128,
        channel_max: 32,
        ..GeneratorConfig::toy()
    }
}

fn pair() -> GeneratorPair {
    clone_for_finetune(&Generator::new(small(), 5, &Device::Cpu, DType::F32).unwrap()).unwrap()
}

fn probe(g: &Generator) -> (LatentWPlus, NoiseBundle) {
    let ws = g.mean_wplus(64, 3).unwrap();
    let noise = NoiseBundle::random(g.config(), 1, &mut rng::seeded(9), &Device::Cpu, DType::F32).unwrap();
    (ws, noise)
}

fn pixels(t: &Tensor) -> Vec<u32> {
    t.flatten_all()
        .unwrap()
        .to_vec1::<f32>()
        .unwrap()
        .iter()
        .map(|v| v.to_bits())
        .collect()
}

#[test]
fn a_fresh_clone_renders_bit_identically() {
    let p = pair();
    assert!(p.shared_mapping());
    p.verify_invariants().unwrap();
    let (ws, noise) = probe(&p.g_real);
    let a = p.g_real.synthesize_frozen(&ws, &noise).unwrap();
    let b = p.g_rendering.synthesize_frozen(&ws, &noise).unwrap();
    assert_eq!(pixels(&a), pixels(&b));
}

#[test]
fn pair_checkpoints_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pair.ckpt");
    let p = pair();
    p.save(&path).unwrap();
    let back = GeneratorPair::load(&path, &Device::Cpu, DType::F32).unwrap();
    assert!(back.shared_mapping());
    assert_eq!(
        back.g_real.weights_checksum().unwrap(),
        p.g_real.weights_checksum().unwrap()
    );
    assert_eq!(
        back.g_rendering.weights_checksum().unwrap(),
        p.g_rendering.weights_checksum().unwrap()
    );
    assert_eq!(back.g_rendering.frozen_parameters(), p.g_rendering.frozen_parameters());
    let (ws, noise) = probe(&p.g_real);
    assert_eq!(
        pixels(&back.g_rendering.synthesize_frozen(&ws, &noise).unwrap()),
        pixels(&p.g_rendering.synthesize_frozen(&ws, &noise).unwrap())
    );
}

#[test]
fn checkpoint_header_carries_magic_and_version() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.ckpt");
    pair().g_real.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), FORMAT_VERSION);
}

fn corrupt(path: &Path, edit: impl FnOnce(&mut Vec<u8>)) {
    let mut bytes = std::fs::read(path).unwrap();
    edit(&mut bytes);
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn damaged_checkpoints_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pair.ckpt");
    let load = |p: &Path| GeneratorPair::load(p, &Device::Cpu, DType::F32);

    pair().save(&path).unwrap();
    corrupt(&path, |b| b[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes()));
    assert!(matches!(load(&path), Err(Error::Format { .. })));

    pair().save(&path).unwrap();
    corrupt(&path, |b| b.truncate(b.len() - 4));
    assert!(matches!(load(&path), Err(Error::Format { .. })));

    pair().save(&path).unwrap();
    corrupt(&path, |b| b[0] = b'X');
    assert!(matches!(load(&path), Err(Error::Format { .. })));

    let single = dir.path().join("g.ckpt");
    pair().g_real.save(&single).unwrap();
    assert!(matches!(load(&single), Err(Error::Format { .. })));
}

#[test]
fn diverged_frozen_parameters_fail_integrity_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pair.ckpt");
    let p = pair();
    p.save(&path).unwrap();
    let torgb = p.g_rendering.torgb_parameter_names();
    let mut f = TensorFile::read(&path).unwrap();
    let target = format!("rendering/{}", torgb[0]);
    let array = f.arrays.iter_mut().find(|a| a.name == target).unwrap();
    array.data[0] += 1.0;
    f.write(&path).unwrap();
    assert!(matches!(
        GeneratorPair::load(&path, &Device::Cpu, DType::F32),
        Err(Error::Integrity(_))
    ));
}

#[test]
fn latents_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let g = pair().g_real;
    let (ws, noise) = probe(&g);
    ws.save(dir.path().join("w.latent")).unwrap();
    noise.save(dir.path().join("w.noise")).unwrap();
    let ws2 = LatentWPlus::load(dir.path().join("w.latent"), &Device::Cpu, DType::F32).unwrap();
    let noise2 = NoiseBundle::load(dir.path().join("w.noise"), &Device::Cpu, DType::F32).unwrap();
    assert!(ws.bit_eq(&ws2).unwrap());
    assert_eq!(
        pixels(&g.synthesize_frozen(&ws, &noise).unwrap()),
        pixels(&g.synthesize_frozen(&ws2, &noise2).unwrap())
    );
}
