use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use uncanny_bench::toy_generator;
use uncanny_core::evaluation::{frechet_distance, FeatureStats};
use uncanny_core::imaging::{gaussian_blur, BlurSpec};
use uncanny_core::losses::PerceptualNet;
use uncanny_core::{rng, DType, Device, Tensor};

fn synthesize(c: &mut Criterion) {
    let (g, ws, noise) = toy_generator(1).unwrap();
    c.bench_function("synthesize_toy_64", |b| {
        b.iter(|| g.synthesize_frozen(black_box(&ws), &noise).unwrap())
    });
}

fn perceptual(c: &mut Criterion) {
    let net = PerceptualNet::toy(0x5EED, &Device::Cpu, DType::F32).unwrap();
    let a = Tensor::randn(0f32, 0.5, (1, 3, 64, 64), &Device::Cpu).unwrap();
    let b = Tensor::randn(0f32, 0.5, (1, 3, 64, 64), &Device::Cpu).unwrap();
    c.bench_function("perceptual_distance_64", |bch| {
        bch.iter(|| net.distance(black_box(&a), &b).unwrap())
    });
}

fn blur(c: &mut Criterion) {
    let x = Tensor::randn(0f32, 1.0, (1, 3, 256, 256), &Device::Cpu).unwrap();
    let spec = BlurSpec::new(13, 10.0).unwrap();
    c.bench_function("gaussian_blur_13_256", |b| {
        b.iter(|| gaussian_blur(black_box(&x), &spec).unwrap())
    });
}

fn frechet(c: &mut Criterion) {
    let mut r = rng::seeded(3);
    let mut feats = |n: usize, d: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| rng::normal_vec(&mut r, d).into_iter().map(f64::from).collect())
            .collect()
    };
    let a = FeatureStats::from_features(&feats(512, 64), "bench").unwrap();
    let b = FeatureStats::from_features(&feats(512, 64), "bench").unwrap();
    c.bench_function("frechet_distance_64d", |bch| {
        bch.iter(|| frechet_distance(black_box(&a), &b).unwrap())
    });
}

criterion_group!(benches, synthesize, perceptual, blur, frechet);
criterion_main!(benches);
