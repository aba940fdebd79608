use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use std::hint::black_box;

use cltr_bench::{corpus, impression_log, ranker};
use cltr_core::clicksim::{run_simulation, ClickModelParams};
use cltr_core::hte::build_hte_dataset;

fn bench_simulation(c: &mut Criterion) {
    let split = corpus(500, 1);
    let pool = split.train_and_validation();
    let context: Vec<usize> = (0..10).collect();
    let params = ClickModelParams::draw(10, 2);
    let model = ranker(split.feature_dim, 2);
    let searches = (10.0 * pool.len() as f64) as u64;

    let mut group = c.benchmark_group("simulation");
    group.throughput(Throughput::Elements(searches));
    group.bench_function("run_simulation_10_searches_per_query", |b| {
        b.iter(|| {
            run_simulation(
                black_box(&pool),
                &model,
                &params,
                &context,
                10.0,
                black_box(11),
            )
            .unwrap()
        })
    });
    group.finish();
}

fn bench_hte_dataset(c: &mut Criterion) {
    let split = corpus(500, 1);
    let log = impression_log(&split, 10.0, 3);
    c.bench_function("hte_dataset_build_position_5", |b| {
        b.iter(|| build_hte_dataset(black_box(&log), 5, 7).unwrap())
    });
}

criterion_group!(benches, bench_simulation, bench_hte_dataset);
criterion_main!(benches);
