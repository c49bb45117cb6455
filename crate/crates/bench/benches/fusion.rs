use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use gifnet::fixtures::synthetic_dataset;
use gifnet::fusion::fuse_luma;
use gifnet::losses::{loss_mse, loss_ssim};
use gifnet::metrics::{metric_ag, metric_ei, metric_scd, metric_vif};
use gifnet::trainer::{LumaSample, Role, TrainConfig, Trainer};
use gifnet::ArchConfig;
use gifnet_bench::{default_params, luma_pair};

fn forward(c: &mut Criterion) {
    let params = default_params();
    let mut group = c.benchmark_group("fuse_luma");
    group.sample_size(10);
    for size in [64, 128] {
        let (a, b) = luma_pair(size);
        group.bench_with_input(BenchmarkId::from_parameter(size), &size, |bench, _| {
            bench.iter(|| fuse_luma(&params, black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let sample = LumaSample::from_joint(&synthetic_dataset(0, 1, 64, 64)[0]);
    let mut trainer = Trainer::new(&ArchConfig::default(), TrainConfig::default()).unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("crop64", |bench| {
        bench.iter(|| trainer.train_step(&[&sample], Role::MmMain).unwrap())
    });
    group.finish();
}

fn losses(c: &mut Criterion) {
    let (a, b) = luma_pair(64);
    c.bench_function("loss_ssim/64", |bench| {
        bench.iter(|| loss_ssim(black_box(&a), black_box(&b)).unwrap())
    });
    c.bench_function("loss_mse/64", |bench| {
        bench.iter(|| loss_mse(black_box(&a), black_box(&b)).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let (a, b) = luma_pair(128);
    let fused = gifnet::Image::from_fn(128, 128, |y, x| 0.5 * (a.get(y, x, 0) + b.get(y, x, 0)));
    c.bench_function("metric_ag/128", |bench| {
        bench.iter(|| metric_ag(black_box(&fused)))
    });
    c.bench_function("metric_ei/128", |bench| {
        bench.iter(|| metric_ei(black_box(&fused)))
    });
    c.bench_function("metric_scd/128", |bench| {
        bench.iter(|| metric_scd(&fused, &a, &b).unwrap())
    });
    c.bench_function("metric_vif/128", |bench| {
        bench.iter(|| metric_vif(&fused, &a, &b).unwrap())
    });
}

criterion_group!(benches, forward, train_step, losses, metrics);
criterion_main!(benches);
