//! Kernel benchmarks for the blocked matrix product.
//!
//! Budgets are trimmed well below criterion's defaults so a full `cargo
//! bench` stays in the tens of seconds on small CI hosts. Treat the numbers
//! as smoke-level, not publication-grade.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use shardpipe_core::synth;

fn flops(n: usize) -> u64 {
    // n^2 dot products of length n, one multiply and one add each.
    (2 * n * n * n) as u64
}

fn square_sizes(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul/square");
    for n in [64usize, 128, 256] {
        let a = synth::uniform(n, n, -1.0, 1.0, 10);
        let b = synth::uniform(n, n, -1.0, 1.0, 11);
        group.throughput(Throughput::Elements(flops(n)));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| a.matmul(&b).unwrap())
        });
    }
    group.finish();
}

fn block_sizes(c: &mut Criterion) {
    // Same 256x256 product under different tile edges. The kernel promises
    // bit-identical output for every choice, so this is purely a cache story.
    let n = 256usize;
    let a = synth::uniform(n, n, -1.0, 1.0, 10);
    let b = synth::uniform(n, n, -1.0, 1.0, 11);
    let mut group = c.benchmark_group("matmul/block");
    group.throughput(Throughput::Elements(flops(n)));
    for block in [16usize, 64, 256] {
        group.bench_with_input(BenchmarkId::from_parameter(block), &block, |bench, &blk| {
            bench.iter(|| a.matmul_with(&b, 1, blk).unwrap())
        });
    }
    group.finish();
}

fn config() -> Criterion {
    Criterion::default()
        .sample_size(10)
        .warm_up_time(Duration::from_millis(300))
        .measurement_time(Duration::from_secs(1))
}

criterion_group! {
    name = benches;
    config = config();
    targets = square_sizes, block_sizes
}
criterion_main!(benches);
