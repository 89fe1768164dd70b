//! Criterion benches comparing the rayon-parallel core against the serial
//! fallback. Placeholder harness; populated once the model stack lands.

use criterion::{criterion_group, criterion_main, Criterion};

fn bench_dot(c: &mut Criterion) {
    let a: Vec<f32> = (0..4096).map(|i| (i as f32).sin()).collect();
    let b: Vec<f32> = (0..4096).map(|i| (i as f32).cos()).collect();
    c.bench_function("dot_f32_4096", |bench| {
        bench.iter(|| countlab::linalg::dot(std::hint::black_box(&a), std::hint::black_box(&b)))
    });
}

criterion_group!(benches, bench_dot);
criterion_main!(benches);
