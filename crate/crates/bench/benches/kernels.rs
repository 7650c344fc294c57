use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kqprune_bench::{mixer_inputs, random_matrix};
use kqprune_core::linalg::{qrcp, srrqr_select, svd, DEFAULT_F};
use kqprune_core::mixers::{mixer_core, Variant};

fn mixer(c: &mut Criterion) {
    let mut group = c.benchmark_group("mixer");
    for variant in Variant::ALL {
        for key_dim in [64, 32] {
            let x = mixer_inputs(512, key_dim, 64, 0);
            group.bench_with_input(BenchmarkId::new(variant.name(), key_dim), &x, |b, x| {
                b.iter(|| mixer_core(&x.q, &x.k, &x.v, &x.beta, &x.alpha, variant, false).unwrap())
            });
        }
    }
    group.finish();
}

fn factorizations(c: &mut Criterion) {
    let m = random_matrix(512, 64, 0);
    c.bench_function("qrcp 512x64", |b| b.iter(|| qrcp(black_box(&m))));
    c.bench_function("srrqr 512x64 k=32", |b| {
        b.iter(|| srrqr_select(black_box(&m), 32, DEFAULT_F).unwrap())
    });
    c.bench_function("svd 512x64", |b| b.iter(|| svd(black_box(&m))));
}

criterion_group!(benches, mixer, factorizations);
criterion_main!(benches);
