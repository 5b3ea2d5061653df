//! Row-parallel kernels against their sequential counterparts.
//!
//! Build with `--no-default-features` to compile the sequential fallback
//! into the parallel entry points as well.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use wsforge_core::lora::{reparameterize_adapter, LayerShape, LoraAdapter};
use wsforge_core::par::{map_indices, map_indices_seq};
use wsforge_core::rng::{normal_tensor, seeded};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 160, 320] {
        let mut rng = seeded(n as u64);
        let a = normal_tensor(&mut rng, &[n, n], 1.0);
        let b = normal_tensor(&mut rng, &[n, n], 1.0);
        group.throughput(Throughput::Elements((n * n * n) as u64));
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul_seq(&b).unwrap()))
        });
    }
    group.finish();
}

fn reparam_rows(c: &mut Criterion) {
    let shapes: Vec<LayerShape> = (0..4).map(|i| LayerShape::new(format!("layer{i}"), 10, 10, 2).unwrap()).collect();
    let mut rng = seeded(7);
    let adapters: Vec<LoraAdapter> =
        (0..512).map(|i| LoraAdapter::random(format!("a{i}"), &shapes, &mut rng).unwrap()).collect();
    let mut group = c.benchmark_group("reparameterize_512_adapters");
    group.throughput(Throughput::Elements(adapters.len() as u64));
    group.bench_function("parallel", |bench| {
        bench.iter(|| black_box(map_indices(adapters.len(), |i| reparameterize_adapter(&adapters[i]).unwrap())))
    });
    group.bench_function("sequential", |bench| {
        bench.iter(|| black_box(map_indices_seq(adapters.len(), |i| reparameterize_adapter(&adapters[i]).unwrap())))
    });
    group.finish();
}

criterion_group!(
    name = benches;
    config = Criterion::default().sample_size(20).configure_from_args();
    targets = matmul, reparam_rows
);
criterion_main!(benches);
