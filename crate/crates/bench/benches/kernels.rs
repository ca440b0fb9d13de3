use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use spde_core::rng::stream_rng;
use spde_core::sde::{simulate, simulate_with_variation};
use spde_core::{BilinearWorkspace, GalerkinSpace, NoiseOperator, NoiseParams, SimConfig, SpectralField};

fn bilinear(c: &mut Criterion) {
    let mut group = c.benchmark_group("bilinear");
    for m in [1, 2, 3] {
        let space = GalerkinSpace::new(m).unwrap();
        let ws = BilinearWorkspace::new(&space);
        let mut rng = stream_rng(1, 0, m as u64);
        let x = SpectralField::random(&space, &mut rng, 1.0);
        let y = SpectralField::random(&space, &mut rng, 1.0);
        group.bench_with_input(BenchmarkId::new("B", m), &m, |b, _| b.iter(|| ws.bilinear(black_box(&x), black_box(&y)).unwrap()));
        group.bench_with_input(BenchmarkId::new("symmetric", m), &m, |b, _| {
            b.iter(|| ws.symmetric(black_box(&x), black_box(&y)).unwrap())
        });
    }
    group.finish();
}

fn noise(c: &mut Criterion) {
    let mut group = c.benchmark_group("noise");
    for m in [1, 2] {
        let space = GalerkinSpace::new(m).unwrap();
        let op = NoiseOperator::new(NoiseParams::default()).unwrap();
        let mut rng = stream_rng(2, 0, m as u64);
        let x = SpectralField::random(&space, &mut rng, 1.0);
        let w = SpectralField::random(&space, &mut rng, 0.0);
        group.bench_with_input(BenchmarkId::new("apply", m), &m, |b, _| b.iter(|| op.apply_noise(black_box(&x), black_box(&w)).unwrap()));
        group.bench_with_input(BenchmarkId::new("inverse", m), &m, |b, _| {
            b.iter(|| op.inverse_apply(black_box(&x), black_box(&w)).unwrap())
        });
    }
    group.finish();
}

fn steps(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate_100_steps");
    group.sample_size(20);
    for m in [1, 2] {
        let space = GalerkinSpace::new(m).unwrap();
        let op = NoiseOperator::new(NoiseParams::default()).unwrap();
        let cfg = SimConfig::new(&space, 1e-3, 0.1, op, 3).unwrap();
        let mut rng = stream_rng(3, 0, m as u64);
        let x0 = SpectralField::random(&space, &mut rng, 1.0);
        let h = SpectralField::random(&space, &mut rng, 1.0);
        group.bench_with_input(BenchmarkId::new("plain", m), &m, |b, _| b.iter(|| simulate(black_box(&x0), &cfg).unwrap()));
        group.bench_with_input(BenchmarkId::new("with_variation", m), &m, |b, _| {
            b.iter(|| simulate_with_variation(black_box(&x0), &h, &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bilinear, noise, steps);
criterion_main!(benches);
