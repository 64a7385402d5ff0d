//! Parallel core against a single worker. Build with `--no-default-features`
//! to bench the sequential fallback under the same names.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use sphattn::complexity::{mc_risk, Network};
use sphattn::kernel::{self, AttentionWeights, FirstLayerDirections};
use sphattn::points::UnitPoints;
use sphattn::selection;
use sphattn::target::{gen_dataset, make_target};
use sphattn::trainer::{train, Solver, TrainOptions};

#[cfg(feature = "parallel")]
fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let all = rayon::current_num_threads();
    let mut sizes = vec![1];
    if all > 1 {
        sizes.push(all);
    }
    sizes
        .into_iter()
        .map(|t| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap();
            (format!("rayon-{t}"), pool)
        })
        .collect()
}

#[cfg(feature = "parallel")]
fn each_mode(f: &mut dyn FnMut(&str, &dyn Fn(&mut (dyn FnMut() + Send)))) {
    for (name, pool) in pools() {
        f(&name, &|body: &mut (dyn FnMut() + Send)| pool.install(body));
    }
}

#[cfg(not(feature = "parallel"))]
fn each_mode(f: &mut dyn FnMut(&str, &dyn Fn(&mut (dyn FnMut() + Send)))) {
    f("sequential", &|body: &mut (dyn FnMut() + Send)| body());
}

fn gram_assembly(c: &mut Criterion) {
    let mut group = c.benchmark_group("population_gram");
    group.sample_size(10);
    let x = UnitPoints::sample(1500, 6, 1).unwrap();
    each_mode(&mut |mode, run| {
        group.bench_function(BenchmarkId::new(mode, 1500), |b| {
            b.iter(|| run(&mut || { black_box(kernel::population_gram(&x, &x, 3).unwrap()); }))
        });
    });
    group.finish();
}

fn stage_one(c: &mut Criterion) {
    let mut group = c.benchmark_group("raw_weights");
    group.sample_size(10);
    let target = make_target(8, 2, &[1.0, 2.8, 5.9], 2).unwrap();
    let data = gen_dataset(&target, 2000, 0.1, 3).unwrap();
    let q = FirstLayerDirections::sample(2000, 8, 4).unwrap();
    each_mode(&mut |mode, run| {
        group.bench_function(BenchmarkId::new(mode, "n=m=2000"), |b| {
            b.iter(|| run(&mut || { black_box(selection::raw_weights(&data, &q, 4).unwrap()); }))
        });
    });
    group.finish();
}

fn training(c: &mut Criterion) {
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    let target = make_target(6, 1, &[1.0, 2.45], 5).unwrap();
    let data = gen_dataset(&target, 1000, 0.5, 6).unwrap();
    let q = FirstLayerDirections::sample(2000, 6, 7).unwrap();
    let tau = AttentionWeights::oracle(6, 1, 1).unwrap();
    for solver in [Solver::Dense, Solver::Factored] {
        let opts = TrainOptions {
            solver,
            ..Default::default()
        };
        each_mode(&mut |mode, run| {
            group.bench_function(BenchmarkId::new(format!("{mode}/{solver:?}"), 333), |b| {
                b.iter(|| run(&mut || { black_box(train(&data, &q, &tau, 0.5, 333, &opts).unwrap()); }))
            });
        });
    }
    group.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let mut group = c.benchmark_group("mc_risk");
    group.sample_size(10);
    let target = make_target(6, 1, &[1.0, 2.45], 8).unwrap();
    let q = FirstLayerDirections::sample(2000, 6, 9).unwrap();
    let tau = AttentionWeights::oracle(6, 1, 1).unwrap();
    let a: Vec<f64> = (0..2000).map(|i| ((i % 7) as f64 - 3.0) * 1e-3).collect();
    let net = Network { a: &a, q: &q, tau: &tau };
    each_mode(&mut |mode, run| {
        group.bench_function(BenchmarkId::new(mode, 20_000), |b| {
            b.iter(|| run(&mut || { black_box(mc_risk(&net, &target, 20_000, 10).unwrap()); }))
        });
    });
    group.finish();
}

criterion_group!(benches, gram_assembly, stage_one, training, monte_carlo);
criterion_main!(benches);
