use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fivo_bench::{log_weights, SEED};
use fivo_core::numerics::normalize_log_weights;
use fivo_core::smc::{resample_alias, resample_multinomial};
use fivo_core::RngStream;

fn resampling(c: &mut Criterion) {
    let mut group = c.benchmark_group("resample");
    for n in [16, 256, 4096] {
        let w = normalize_log_weights(&log_weights(n)).expect("finite weights").weights;
        group.bench_with_input(BenchmarkId::new("multinomial", n), &n, |b, &n| {
            let mut rng = RngStream::new(SEED, 2);
            b.iter(|| resample_multinomial(&w, n, &mut rng))
        });
        group.bench_with_input(BenchmarkId::new("alias", n), &n, |b, &n| {
            let mut rng = RngStream::new(SEED, 2);
            b.iter(|| resample_alias(&w, n, &mut rng))
        });
    }
    group.finish();
}

criterion_group!(benches, resampling);
criterion_main!(benches);
