//! Data-parallel kernels under a one-thread pool and a multi-thread pool.
//!
//! Run `cargo bench -p lipgate --no-default-features` for the plain-iterator
//! build; both groups then execute the same sequential code.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

use lipgate::datagen::{self, DatasetSpec, Family, Task};
use lipgate::models::{ArchSpec, Mode, ReconModel, TrainConfig};
use lipgate::{parallel, seed, uncertainty};

const N: usize = 32;
const BATCH: usize = 64;

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let wide = std::thread::available_parallelism().map_or(4, |n| n.get()).max(2);
    [1, wide]
        .into_iter()
        .map(|t| {
            let label = if parallel::enabled() { format!("threads-{t}") } else { format!("sequential-build-{t}") };
            (label, rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap())
        })
        .collect()
}

fn inputs(width: usize, count: usize) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(7);
    (0..count).map(|_| (0..width).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn automap() -> ReconModel {
    let mut spec = ArchSpec::automap(N);
    spec.conv_filters = 8;
    ReconModel::init(spec, 1).unwrap()
}

fn forward(c: &mut Criterion) {
    let model = automap();
    let xs = inputs(model.spec().input_width(), BATCH);
    let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
    let modes = vec![Mode::Deterministic; BATCH];
    let mut g = c.benchmark_group("automap_forward_batch");
    g.sample_size(10);
    for (label, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| pool.install(|| model.forward_batch(&refs, &modes).unwrap()))
        });
    }
    g.finish();
}

fn gradient(c: &mut Criterion) {
    let model = automap();
    let xs = inputs(model.spec().input_width(), BATCH);
    let ys = inputs(model.spec().output_width(), BATCH);
    let batch: Vec<(&[f64], &[f64])> = xs.iter().zip(&ys).map(|(x, y)| (&x[..], &y[..])).collect();
    let cfg = TrainConfig::automap();
    let mut g = c.benchmark_group("automap_loss_and_grad");
    g.sample_size(10);
    for (label, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| pool.install(|| model.loss_and_grad(&batch, &cfg, None).unwrap()))
        });
    }
    g.finish();
}

fn lipschitz(c: &mut Criterion) {
    let mut spec = ArchSpec::unet(N);
    spec.conv_filters = 8;
    let model = ReconModel::init(spec, 2).unwrap();
    let xs = inputs(N * N, BATCH);
    let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
    let mut g = c.benchmark_group("unet_local_lipschitz_batch");
    g.sample_size(10);
    for (label, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| pool.install(|| uncertainty::local_lipschitz_batch(&model, &refs, 0.05, 3).unwrap()))
        });
    }
    g.finish();
}

fn dataset(c: &mut Criterion) {
    let spec = DatasetSpec::new(Task::Ct, Family::IdEllipse, 16, N, 0);
    let mut g = c.benchmark_group("ct_build_dataset");
    g.sample_size(10);
    for (label, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| pool.install(|| datagen::build_dataset(&spec).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, forward, gradient, lipschitz, dataset);
criterion_main!(benches);
