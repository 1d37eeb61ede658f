use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use mlstab::bench3bus::{linear_grid, solve_load, sweep_point, BenchParams, SweepTarget};
use mlstab::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn residual_batch(c: &mut Criterion) {
    let (case, op) = solve_load(&BenchParams::default()).unwrap();
    let model = &case.composite;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut group = c.benchmark_group("residual_batch");
    for n in [256usize, 4096] {
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| op.values().iter().map(|x| x * (1.0 + 1e-3 * rng.gen_range(-1.0..1.0))).collect())
            .collect();
        group.bench_with_input(BenchmarkId::new("parallel", n), &points, |b, p| {
            b.iter(|| model.eval_residual_batch(black_box(p)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &points, |b, p| {
            b.iter(|| p.iter().map(|x| model.residual_slice(black_box(x)).unwrap()).collect::<Vec<_>>())
        });
    }
    group.finish();
}

fn spectrum_sweep(c: &mut Criterion) {
    let (case, _) = solve_load(&BenchParams::default()).unwrap();
    let refs = case.params.references.clone();
    let grid = linear_grid(0.0, 0.6, 16);
    let mut group = c.benchmark_group("spectrum_sweep");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| par::map(&grid, |&p| sweep_point(&case, &refs, SweepTarget::Both, p).unwrap()))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| grid.iter().map(|&p| sweep_point(&case, &refs, SweepTarget::Both, p).unwrap()).collect::<Vec<_>>())
    });
    group.finish();
}

criterion_group!(benches, residual_batch, spectrum_sweep);
criterion_main!(benches);
