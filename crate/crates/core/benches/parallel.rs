//! Sequential versus thread-pool execution of the per-example stages.
//!
//! Every group runs the same workload at `Jobs::SEQUENTIAL` and at a
//! multi-threaded setting; outputs are identical by construction, so the
//! comparison is purely about wall time. Build with
//! `--no-default-features` to measure the sequential fallback only.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use groundcheck::alignhead::{evaluate_grounding, train_head, HeadConfig, StageConfig, TrainHyper};
use groundcheck::datasets::{Example, Split};
use groundcheck::metrics::{report, ReportConfig};
use groundcheck::par::Jobs;
use groundcheck::synthworld::{gen_world, simulate, SimPredictor, World, WorldConfig};

fn settings() -> Vec<(&'static str, Jobs)> {
    vec![("sequential", Jobs::SEQUENTIAL), ("threads-4", Jobs::new(4))]
}

fn world(n: usize) -> World {
    let cfg = WorldConfig {
        n_examples: n,
        dev_fraction: 0.2,
        ..WorldConfig::default()
    };
    gen_world(&cfg, Jobs::SEQUENTIAL).unwrap()
}

fn bench_gen_world(c: &mut Criterion) {
    let cfg = WorldConfig {
        n_examples: 200,
        ..WorldConfig::default()
    };
    let mut g = c.benchmark_group("gen_world");
    for (name, jobs) in settings() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| gen_world(black_box(&cfg), jobs).unwrap()));
    }
    g.finish();
}

fn bench_report(c: &mut Criterion) {
    let w = world(400);
    let examples: Vec<Example> = w.examples().cloned().collect();
    let preds = simulate(&examples, &w.config, &SimPredictor::new(0.5, 1).unwrap(), Jobs::SEQUENTIAL).unwrap();
    let mut g = c.benchmark_group("simulate_and_report");
    for (name, jobs) in settings() {
        g.bench_function(BenchmarkId::new("simulate", name), |b| {
            b.iter(|| simulate(black_box(&examples), &w.config, &SimPredictor::new(0.5, 1).unwrap(), jobs).unwrap())
        });
        let rc = ReportConfig {
            jobs,
            ..ReportConfig::default()
        };
        g.bench_function(BenchmarkId::new("report", name), |b| {
            b.iter(|| report(black_box(&examples), &preds, &rc).unwrap())
        });
    }
    g.finish();
}

fn bench_head(c: &mut Criterion) {
    let w = world(60);
    let train = w.split(Split::Train);
    let dev = w.split(Split::Dev);
    let cfg = HeadConfig {
        in_channels: w.config.d_p + w.config.d_q,
        stages: vec![StageConfig::doubling(16), StageConfig::doubling(8)],
        target: w.config.example_dims(),
    };
    let mut g = c.benchmark_group("head");
    g.sample_size(10);
    for (name, jobs) in settings() {
        let hyper = TrainHyper {
            lr: 0.3,
            steps: 5,
            batch: 16,
            gaussian_sigma: 4.0,
            jobs,
            ..TrainHyper::default()
        };
        g.bench_function(BenchmarkId::new("train_5_steps", name), |b| {
            b.iter(|| train_head(&w.bundles, black_box(train), None, &cfg, &hyper).unwrap())
        });
        let weights = train_head(&w.bundles, train, None, &cfg, &hyper).unwrap().weights;
        g.bench_function(BenchmarkId::new("evaluate", name), |b| {
            b.iter(|| evaluate_grounding(&weights, black_box(dev), &w.bundles, None, jobs).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_gen_world, bench_report, bench_head);
criterion_main!(benches);
