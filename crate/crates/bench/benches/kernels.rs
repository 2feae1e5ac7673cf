//! Dense f32 matmul vs the packed deferred-scale kernel, plus quantizer
//! throughput.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use binquant::kernels::{matmul_ref, PackedLayer};
use binquant::quant::{self, QuantScheme};
use binquant_bench::random_matrix;

fn matmul_paths(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    group.sample_size(20);
    for &(m, k, n) in &[(16usize, 128usize, 128usize), (32, 256, 256)] {
        let a = random_matrix(1, m, k);
        let w = random_matrix(2, n, k);
        let label = format!("{m}x{k}x{n}");

        group.bench_with_input(BenchmarkId::new("f32_dense", &label), &(), |b, ()| {
            b.iter(|| matmul_ref(black_box(&a), m, black_box(&w), (n, k)).unwrap());
        });

        for scheme in [QuantScheme::e4(), QuantScheme::e5(), QuantScheme::e2()] {
            let q = quant::quantize(&w, (n, k), &scheme).unwrap();
            let packed = PackedLayer::from_quantized(&q).unwrap();
            let id = BenchmarkId::new(format!("packed_{scheme}"), &label);
            group.bench_with_input(id, &(), |b, ()| {
                b.iter(|| packed.matmul(black_box(&a), m).unwrap());
            });
        }
    }
    group.finish();
}

fn quantize_throughput(c: &mut Criterion) {
    let mut group = c.benchmark_group("quantize");
    group.sample_size(20);
    let w = random_matrix(3, 256, 256);
    for scheme in [QuantScheme::e1(), QuantScheme::e4(), QuantScheme::e5()] {
        group.bench_function(scheme.to_string(), |b| {
            b.iter(|| quant::quantize(black_box(&w), (256, 256), &scheme).unwrap());
        });
    }
    group.finish();
}

criterion_group!(benches, matmul_paths, quantize_throughput);
criterion_main!(benches);
