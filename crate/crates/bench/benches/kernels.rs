use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use neurok_bench::{cube, latent_point, neurok_map, small_model};
use neurok_core::dynamics::{DynamicState, Dynamics, Integrator, LatentMap, PotentialSpec, SimConfig};
use neurok_core::geometry::{chamfer, Vec3};

fn decoder(c: &mut Criterion) {
    let mesh = cube(3).unwrap();
    let cfg = small_model();
    let map = neurok_map(&mesh, &cfg).unwrap();
    let q = latent_point(map.dim());
    c.bench_function("decoder/eval", |b| b.iter(|| map.eval(black_box(&q)).unwrap()));
    c.bench_function("decoder/jacobian", |b| b.iter(|| map.jacobian(black_box(&q)).unwrap()));
}

fn dynamics(c: &mut Criterion) {
    let mesh = cube(3).unwrap();
    let cfg = small_model();
    let map = neurok_map(&mesh, &cfg).unwrap();
    let q0 = latent_point(map.dim());
    let spec = PotentialSpec::default();
    let mut group = c.benchmark_group("dynamics/step");
    group.sample_size(20);
    for integrator in [Integrator::Rk4, Integrator::SemiImplicit] {
        let sim = SimConfig { dt: 1e-3, integrator, ..Default::default() };
        let mut dynamics = Dynamics::new(&map, &spec, &sim, &q0).unwrap();
        let state = DynamicState { q: q0.clone(), qdot: vec![0.01; q0.len()], t: 0.0 };
        group.bench_function(BenchmarkId::from_parameter(format!("{integrator:?}")), |b| {
            b.iter(|| dynamics.step(black_box(&state)).unwrap())
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut group = c.benchmark_group("chamfer");
    for n in [256usize, 2048] {
        let a: Vec<Vec3> = (0..n).map(|i| {
            let t = i as f64 * 0.37;
            Vec3::new(t.sin(), (1.3 * t).cos(), (0.7 * t).sin())
        }).collect();
        let b: Vec<Vec3> = a.iter().map(|p| p * 1.05 + Vec3::repeat(0.01)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| chamfer(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, decoder, dynamics, metrics);
criterion_main!(benches);
