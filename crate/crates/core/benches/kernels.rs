//! Hot kernels and a full training step, on the default rayon pool and on a
//! single-thread pool. Build with `--no-default-features` for the purely
//! sequential code path.

use std::hint::black_box;

use bilie::backbone::infer;
use bilie::config::RunConfig;
use bilie::harness::train::loss_and_grads;
use bilie::harness::Sample;
use bilie::kernels::{dwconv3x3, gemm, im2col3x3};
use bilie::losses::PerceptualExtractor;
use bilie::Tensor;
use criterion::{criterion_group, criterion_main, Criterion};

fn wave(shape: [usize; 3], phase: f64) -> Tensor {
    Tensor::from_fn(shape, |i| 0.5 + 0.4 * (i as f64 * 0.173 + phase).sin())
}

#[cfg(feature = "parallel")]
fn pools() -> Vec<(&'static str, Option<rayon::ThreadPool>)> {
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    vec![("rayon", None), ("single", Some(single))]
}

#[cfg(not(feature = "parallel"))]
fn pools() -> Vec<(&'static str, Option<()>)> {
    vec![("sequential", None)]
}

#[cfg(feature = "parallel")]
fn within<R: Send>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> R + Send) -> R {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn within<R>(_: &Option<()>, f: impl FnOnce() -> R) -> R {
    f()
}

fn kernels(c: &mut Criterion) {
    let (ch, h, w) = (64, 64, 64);
    let x = wave([ch, h, w], 0.0);
    let dw = wave([ch, 3, 3], 1.0);
    let bias = vec![0.1; ch];
    let a = wave([128, 1, ch * 9], 2.0);
    let cols = im2col3x3(x.data(), ch, h, w);
    let mut out = vec![0.0; 128 * h * w];
    for (label, pool) in pools() {
        let mut g = c.benchmark_group(label);
        g.bench_function("dwconv3x3 64x64x64", |b| {
            b.iter(|| within(&pool, || black_box(dwconv3x3(x.data(), dw.data(), &bias, ch, h, w))))
        });
        g.bench_function("im2col3x3 64x64x64", |b| {
            b.iter(|| within(&pool, || black_box(im2col3x3(x.data(), ch, h, w))))
        });
        g.bench_function("gemm 128x576x4096", |b| {
            b.iter(|| within(&pool, || gemm(128, ch * 9, h * w, 1.0, a.data(), false, &cols, false, 0.0, &mut out)))
        });
        g.finish();
    }
}

fn model(c: &mut Criterion) {
    let cfg = RunConfig::desk();
    let model = cfg.model_config();
    let params = bilie::backbone::init_params(&model, 0).unwrap();
    let bins = model.arch.event_bins;
    let sample = Sample {
        name: "bench".into(),
        lowlight: wave([3, 64, 64], 0.3).scale(0.3),
        voxels: wave([bins, 64, 64], 0.7),
        gt: wave([3, 64, 64], 0.3),
    };
    let extractor = PerceptualExtractor::new(PerceptualExtractor::DEFAULT_SEED);
    for (label, pool) in pools() {
        let mut g = c.benchmark_group(label);
        g.sample_size(10);
        g.bench_function("desk infer 64x64", |b| {
            b.iter(|| within(&pool, || black_box(infer(&params, &model, &sample.lowlight, &sample.voxels).unwrap())))
        });
        g.bench_function("desk train step 64x64", |b| {
            b.iter(|| within(&pool, || black_box(loss_and_grads(&params, &sample, &model, &cfg, &extractor).unwrap())))
        });
        g.finish();
    }
}

criterion_group!(benches, kernels, model);
criterion_main!(benches);
