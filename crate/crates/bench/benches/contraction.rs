use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use ttmoe_bench::{contraction_case, BATCHES};
use ttmoe_core::bench::{contract_path, reconstruct_path};
use ttmoe_core::tt::paper;

fn query_projection(c: &mut Criterion) {
    let shape = paper::query_shape();
    let mut group = c.benchmark_group("q-2048x2048-r5");
    group.sample_size(10);
    for batch in BATCHES {
        let (cores, x) = contraction_case(&shape, batch);
        group.bench_with_input(BenchmarkId::new("contract", batch), &x, |b, x| {
            b.iter(|| contract_path(black_box(x), &cores).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("reconstruct", batch), &x, |b, x| {
            b.iter(|| reconstruct_path(black_box(x), &cores).unwrap())
        });
    }
    group.finish();
}

fn value_projection(c: &mut Criterion) {
    let shape = paper::value_shape();
    let mut group = c.benchmark_group("v-2048x512-r5");
    group.sample_size(10);
    for batch in [2, 32, 128] {
        let (cores, x) = contraction_case(&shape, batch);
        group.bench_with_input(BenchmarkId::new("contract", batch), &x, |b, x| {
            b.iter(|| contract_path(black_box(x), &cores).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("reconstruct", batch), &x, |b, x| {
            b.iter(|| reconstruct_path(black_box(x), &cores).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, query_projection, value_projection);
criterion_main!(benches);
