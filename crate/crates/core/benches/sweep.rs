use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use cisp_core::sim::{run_ber_sweep_with, Execution, SimConfig};
use cisp_core::Scheme;

fn config(k: usize) -> SimConfig {
    SimConfig {
        snr_db: vec![20.0, 30.0],
        trials: 200,
        seed: 3,
        schemes: vec![Scheme::Zf, Scheme::CiIterative],
        ..SimConfig::new(k, k, 16)
    }
}

fn sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("ber_sweep");
    group.sample_size(10);
    for k in [4, 8] {
        let cfg = config(k);
        group.bench_with_input(BenchmarkId::new("sequential", k), &cfg, |b, cfg| {
            b.iter(|| run_ber_sweep_with(black_box(cfg), Execution::Sequential).unwrap())
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", k), &cfg, |b, cfg| {
            b.iter(|| run_ber_sweep_with(black_box(cfg), Execution::Parallel).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, sweep);
criterion_main!(benches);
