//! Structured block GLS against the dense stacked solve it replaces.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mner::blup;
use mner::sim::oracle::{dense_gls_oracle, DENSE_ORACLE_LIMIT};
use mner_bench::study_instance;

fn bench_gls(c: &mut Criterion) {
    let mut group = c.benchmark_group("gls");
    for m in [8usize, 16, 40] {
        let (data, psi, sigma) = study_instance(m, 11);
        group.bench_with_input(BenchmarkId::new("structured", m), &m, |b, _| {
            b.iter(|| blup::gls_fit(&data, &psi, &sigma).unwrap());
        });
        if data.n_total() * data.k() <= DENSE_ORACLE_LIMIT {
            group.bench_with_input(BenchmarkId::new("dense", m), &m, |b, _| {
                b.iter(|| dense_gls_oracle(&data, &psi, &sigma).unwrap());
            });
        }
    }
    // Scaling beyond the dense oracle's size limit.
    for m in [160usize, 640] {
        let (data, psi, sigma) = study_instance(m, 12);
        group.bench_with_input(BenchmarkId::new("structured", m), &m, |b, _| {
            b.iter(|| blup::gls_fit(&data, &psi, &sigma).unwrap());
        });
    }
    group.finish();
}

criterion_group!(benches, bench_gls);
criterion_main!(benches);
