use std::hint::black_box;

use conformal_bench::gaussian_pair;
use conformal_core::{kendall_tau, ksg_mutual_information};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn ksg(c: &mut Criterion) {
    let mut g = c.benchmark_group("ksg");
    for n in [1000, 5000] {
        let (x, s) = gaussian_pair(n, 0.6, 1);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| ksg_mutual_information(black_box(&x), &s, 3).unwrap())
        });
    }
    g.finish();
}

fn kendall(c: &mut Criterion) {
    let mut g = c.benchmark_group("kendall_tau");
    for n in [1000, 100_000] {
        let (x, s) = gaussian_pair(n, 0.6, 2);
        let a = x.col_values(0);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| kendall_tau(black_box(&a), &s).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, ksg, kendall);
criterion_main!(benches);
