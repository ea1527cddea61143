//! Parallel against single-threaded runs of the heavy kernels. Build with
//! `--no-default-features` to time the sequential fallback itself.

use std::hint::black_box;

use agmonlab::agmon::{agmon_distances, Connectivity};
use agmonlab::par::{current_threads, with_threads};
use agmonlab::potential::{sample_potential, PotentialKind};
use agmonlab::schrodinger::{assemble, fundamental_columns, Boundary, CoefficientMatrix};
use agmonlab::verify::default_sources;
use agmonlab::weights::maximal_field;
use agmonlab::Grid;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn kernels(c: &mut Criterion) {
    let g = Grid::cube(-2.0, 2.0, 25).unwrap();
    let v = sample_potential(&PotentialKind::radial_power(2.0), &g).unwrap();
    let m = maximal_field(&v).unwrap();
    let op = assemble(&v, None, &CoefficientMatrix::Identity, 0.0, Boundary::Asymptotic).unwrap();
    let ys = default_sources(&g, 3);
    let threads = [("parallel", current_threads()), ("sequential", 1)];

    let mut group = c.benchmark_group("kernels");
    group.sample_size(10);
    for (label, n) in threads {
        group.bench_with_input(BenchmarkId::new("maximal_field", label), &n, |b, &n| {
            b.iter(|| with_threads(n, || maximal_field(black_box(&v)).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("agmon_distances", label), &n, |b, &n| {
            b.iter(|| with_threads(n, || agmon_distances(black_box(&m), &ys, Connectivity::TwentySix).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("fundamental_columns", label), &n, |b, &n| {
            b.iter(|| with_threads(n, || fundamental_columns(black_box(&op), &ys, 1e-8).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
