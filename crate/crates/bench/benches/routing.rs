use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use ttmoe_bench::routing_case;
use ttmoe_core::router::{moe_forward, GateMode};

fn two_pass_inference(c: &mut Criterion) {
    let mut group = c.benchmark_group("moe-forward-toy");
    group.sample_size(20);
    for n in [2, 6] {
        let (base, bank, router, tokens) = routing_case(n, 16);
        group.bench_function(BenchmarkId::new("experts", n), |b| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            b.iter(|| moe_forward(black_box(&tokens), &base, &bank, &router, GateMode::Eval, &mut rng).unwrap())
        });
    }
    let (base, _, _, tokens) = routing_case(1, 16);
    group.bench_function("base-only", |b| b.iter(|| base.forward(black_box(&tokens), None).unwrap()));
    group.finish();
}

criterion_group!(benches, two_pass_inference);
criterion_main!(benches);
