//! Shared fixtures for the criterion benchmarks.

use cltr_core::clicksim::{run_simulation, ClickModelParams, ImpressionRecord};
use cltr_core::corpus::{generate_synthetic_corpus, CorpusSplit};
use cltr_core::ltr::LinearRankModel;
use cltr_core::seeding;

use rand::Rng;

/// A normalized synthetic corpus with `n_queries` queries of 10 documents.
pub fn corpus(n_queries: usize, seed: u64) -> CorpusSplit {
    let split = generate_synthetic_corpus(n_queries, 10, 20, seed).unwrap();
    cltr_core::corpus::normalize_features(split)
}

/// A fixed linear ranker over `dim` features.
pub fn ranker(dim: usize, seed: u64) -> LinearRankModel {
    let mut rng = seeding::rng(seed);
    LinearRankModel {
        weights: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        l2: 1e-4,
        lr: 0.01,
        epochs: 0,
        seed,
    }
}

/// A seeded intervention log over the corpus's train+validation pool.
pub fn impression_log(split: &CorpusSplit, avg_searches: f64, seed: u64) -> Vec<ImpressionRecord> {
    let pool = split.train_and_validation();
    let context: Vec<usize> = (0..10).collect();
    let params = ClickModelParams::draw(context.len(), seed);
    run_simulation(&pool, &ranker(split.feature_dim, seed), &params, &context, avg_searches, seed).unwrap()
}

/// Random regression rows `y = step(x0) + 0.3 x1`.
pub fn regression_rows(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = seeding::rng(seed);
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect();
    let y: Vec<f64> = x
        .iter()
        .map(|row| if row[0] > 0.5 { 1.0 } else { 0.0 } + 0.3 * row[1])
        .collect();
    (x, y)
}

/// Random treatment rows with a step treatment effect.
pub fn causal_rows(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>, Vec<u8>) {
    let mut rng = seeding::rng(seed);
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect();
    let p: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect();
    let y: Vec<f64> = x
        .iter()
        .zip(&p)
        .map(|(row, &t)| {
            let tau = if row[0] > 0.5 { 0.4 } else { 0.1 };
            0.2 + 0.3 * row[1] + f64::from(t) * tau
        })
        .collect();
    (x, y, p)
}
