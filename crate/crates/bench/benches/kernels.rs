//! Microbenchmarks for the hot kernels: the sequence scan against the dense
//! attention reference, and the 3D convolution. `cargo bench -p m4fuse-bench`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use m4fuse_bench::{random_tensor, scan_inputs};
use m4fuse_core::bench::attention_reference;
use m4fuse_core::{conv, ops};

fn scan(c: &mut Criterion) {
    let mut g = c.benchmark_group("ssm_scan");
    for l in [1024usize, 2048, 4096] {
        let [x, abar, bbar, cout] = scan_inputs(l, 32, 16);
        g.throughput(Throughput::Elements(l as u64));
        g.bench_with_input(BenchmarkId::from_parameter(l), &l, |b, _| {
            b.iter(|| ops::ssm_scan_kernel(&x, &abar, &bbar, &cout, false).unwrap())
        });
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("attention_reference");
    for l in [256usize, 512, 1024] {
        let q = random_tensor(&[1, l, 32], 10);
        let k = random_tensor(&[1, l, 32], 11);
        let v = random_tensor(&[1, l, 32], 12);
        g.throughput(Throughput::Elements(l as u64));
        g.bench_with_input(BenchmarkId::from_parameter(l), &l, |b, _| {
            b.iter(|| attention_reference(&q, &k, &v).unwrap())
        });
    }
    g.finish();
}

fn conv3d(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3d");
    for side in [8usize, 16] {
        let x = random_tensor(&[1, 8, side, side, side], 20);
        let w = random_tensor(&[8, 8, 3, 3, 3], 21);
        let bias = random_tensor(&[8], 22);
        g.throughput(Throughput::Elements((side * side * side) as u64));
        g.bench_with_input(BenchmarkId::from_parameter(side), &side, |b, _| {
            b.iter(|| conv::conv3d(&x, &w, Some(&bias), 1, 1, 1).unwrap())
        });
    }
    g.finish();
}

criterion_group!(kernels, scan, attention, conv3d);
criterion_main!(kernels);
