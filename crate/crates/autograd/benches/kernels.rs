//! Kernel throughput with the rayon pool versus a single-threaded pool.
//! Build with `--no-default-features` to measure the sequential fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dte_autograd::{grad, kernels, Array, Tensor};

fn input(shape: [usize; 4]) -> Vec<f64> {
    let n: usize = shape.iter().product();
    (0..n).map(|i| ((i * 7919) % 1000) as f64 / 500.0 - 1.0).collect()
}

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let seq = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let par = rayon::ThreadPoolBuilder::new().build().unwrap();
    vec![("sequential", seq), ("parallel", par)]
}

fn bench_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    group.sample_size(10);
    let xs = [8, 32, 32, 32];
    let ws = [32, 32, 3, 3];
    let x = input(xs);
    let w = input(ws);
    for (name, pool) in pools() {
        group.bench_with_input(BenchmarkId::new(name, "8x32x32x32"), &(), |b, _| {
            b.iter(|| pool.install(|| black_box(kernels::conv2d(&x, xs, &w, ws))))
        });
    }
    group.finish();
}

fn bench_conv_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_backward");
    group.sample_size(10);
    let x = Array::new(&[8, 16, 32, 32], input([8, 16, 32, 32]));
    let w = Array::new(&[16, 16, 3, 3], input([16, 16, 3, 3]));
    for (name, pool) in pools() {
        group.bench_function(name, |b| {
            b.iter(|| {
                pool.install(|| {
                    let xt = Tensor::param(x.clone());
                    let wt = Tensor::param(w.clone());
                    let loss = xt.conv2d(&wt).leaky_relu(0.2).avg_pool2().square().sum();
                    let gs = grad(&loss, &[&xt, &wt], false).unwrap();
                    black_box(gs.into_iter().map(|g| g.map(|t| t.to_array())).collect::<Vec<_>>())
                })
            })
        });
    }
    group.finish();
}

fn bench_upsample(c: &mut Criterion) {
    let mut group = c.benchmark_group("upsample_bilinear2");
    let xs = [16, 32, 32, 32];
    let x = input(xs);
    for (name, pool) in pools() {
        group.bench_function(name, |b| {
            b.iter(|| pool.install(|| black_box(kernels::upsample_bilinear2(&x, xs))))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conv, bench_conv_backward, bench_upsample);
criterion_main!(benches);
