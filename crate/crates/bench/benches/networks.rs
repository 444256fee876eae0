//! Forward passes, convolution and one training iteration.
//!
//! Run with: cargo bench -p spatialgan-bench

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spatialgan_core::data::{generate_shapes_dataset, ShapesConfig};
use spatialgan_core::tensor::{ConvGeom, Tensor};
use spatialgan_core::{ArchConfig, AttributeLabel, ImageTensor, LatentVector, ModelBundle, SegmentationMap, TrainConfig, Trainer};

fn desk_arch() -> ArchConfig {
    ArchConfig { image_size: 32, n_z: 64, base_channels: 8, ..ArchConfig::reference(4, 3) }
}

fn bench_conv(c: &mut Criterion) {
    let x = Tensor::<f32>::full(&[4, 32, 32, 32], 0.5);
    let w = Tensor::<f32>::full(&[64, 32, 4, 4], 0.01);
    c.bench_function("conv2d 4x32x32x32 k4 s2", |b| b.iter(|| black_box(&x).conv2d(black_box(&w), ConvGeom::new(4, 2, 1))));
}

fn bench_forward(c: &mut Criterion) {
    let arch = desk_arch();
    let bundle = ModelBundle::new(&arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z: Vec<_> = (0..16).map(|_| LatentVector::sample(arch.n_z, &mut rng)).collect();
    let labels = vec![AttributeLabel::new(vec![1, 0, 0]).unwrap(); 16];
    let maps = vec![SegmentationMap::filled(32, 32, 4, 0).unwrap(); 16];
    c.bench_function("generator 16x32x32", |b| b.iter(|| bundle.generator.generate(&z, &labels, &maps).unwrap()));
    let images = vec![ImageTensor::new(32, 32, vec![0.0; 3 * 32 * 32]).unwrap(); 16];
    c.bench_function("segmentor 16x32x32", |b| b.iter(|| bundle.segmentor.logits(&images).unwrap()));
}

fn bench_training(c: &mut Criterion) {
    let ds = generate_shapes_dataset(&ShapesConfig { count: 64, ..Default::default() }).unwrap();
    let cfg = TrainConfig { n_repeat: 1, ..TrainConfig::new(desk_arch()) };
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("outer iteration m=16 n_repeat=1", |b| {
        let mut t = Trainer::new(cfg.clone(), &ds).unwrap();
        b.iter(|| t.outer_iteration(&ds).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_conv, bench_forward, bench_training);
criterion_main!(benches);
