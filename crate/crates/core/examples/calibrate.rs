//! Scratch calibration harness for the trend corners (not part of the
//! deliverable test suite).

use std::io::Write;
use std::path::Path;

use rand::Rng;

use cltr_core::clicksim::{run_simulation, ClickModelParams};
use cltr_core::corpus::{select_context_features, subsample_queries};
use cltr_core::experiment::{load_or_generate_corpus, run_cell, CorpusConfig, ExperimentConfig, Method};
use cltr_core::eval::TrueTauOracle;
use cltr_core::forest::{CausalForest, TreeNode};
use cltr_core::hte::build_hte_dataset;
use cltr_core::ltr::train_production_ranker;
use cltr_core::seeding::{self, cell_seed};

fn piecewise_score(x: &[f64], noise: f64) -> f64 {
    let mut s = 0.0;
    // a band: invisible to linear scorers, two splits for a tree
    if x[0] > 0.25 && x[0] < 0.6 {
        s += 1.6;
    }
    s + 0.8 * x[1] + noise
}

fn write_piecewise_letor(
    dir: &Path,
    n_queries: usize,
    docs: usize,
    dim: usize,
    seed: u64,
    rel_frac: f64,
    noise_sd: f64,
) {
    let mut rng = seeding::rng(seed);
    let mut all: Vec<(usize, Vec<f64>, f64)> = Vec::new();
    for q in 0..n_queries {
        for _ in 0..docs {
            let x: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            // crude gaussian-ish noise from the sum of uniforms
            let noise = noise_sd * ((0..4).map(|_| rng.random::<f64>()).sum::<f64>() - 2.0);
            let s = piecewise_score(&x, noise);
            all.push((q, x, s));
        }
    }
    let mut scores: Vec<f64> = all.iter().map(|t| t.2).collect();
    scores.sort_by(|a, b| a.total_cmp(b));
    let q = |p: f64| scores[((p * scores.len() as f64) as usize).min(scores.len() - 1)];
    let grade3_at = 1.0 - rel_frac;
    let th = [
        q(grade3_at - 0.3),
        q(grade3_at - 0.15),
        q(grade3_at),
        q(grade3_at + rel_frac * 0.6),
    ];
    let grade = |s: f64| th.iter().take_while(|&&t| s >= t).count();

    let n_train = (0.6 * n_queries as f64).round() as usize;
    let n_val = (0.2 * n_queries as f64).round() as usize;
    let mut files = [
        std::io::BufWriter::new(std::fs::File::create(dir.join("train.txt")).unwrap()),
        std::io::BufWriter::new(std::fs::File::create(dir.join("vali.txt")).unwrap()),
        std::io::BufWriter::new(std::fs::File::create(dir.join("test.txt")).unwrap()),
    ];
    for (qid, x, s) in &all {
        let split = if *qid < n_train {
            0
        } else if *qid < n_train + n_val {
            1
        } else {
            2
        };
        let f = &mut files[split];
        write!(f, "{} qid:{}", grade(*s), qid).unwrap();
        for (j, v) in x.iter().enumerate() {
            write!(f, " {}:{}", j + 1, v).unwrap();
        }
        writeln!(f).unwrap();
    }
}

fn main() {
    // args: min_leaf_per_arm cpbm_epochs n_seeds subsample corner(sparse|dense|both) xl_min_leaf rel_frac ncf
    let args: Vec<String> = std::env::args().collect();
    let min_leaf_per_arm: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(5);
    let cpbm_epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(200);
    let n_seeds: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(3);
    let subsample: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let corner: String = args.get(5).cloned().unwrap_or_else(|| "both".into());
    let xl_min_leaf: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(5);
    let rel_frac: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(0.3);
    let ncf: usize = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(0);
    let docs: usize = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(10);
    let noise_sd: f64 = args.get(10).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    let honest: bool = args.get(11).map(|s| s != "0").unwrap_or(true);
    let max_depth: usize = args.get(12).map(|s| s.parse().unwrap()).unwrap_or(12);
    let batch: usize = args.get(13).map(|s| s.parse().unwrap()).unwrap_or(256);
    let decay: usize = args.get(14).map(|s| s.parse().unwrap()).unwrap_or(0);
    let xl_depth: usize = args.get(15).map(|s| s.parse().unwrap()).unwrap_or(8);
    let xl_trees: usize = args.get(16).map(|s| s.parse().unwrap()).unwrap_or(100);
    let xl_g: f64 = args.get(17).map(|s| s.parse().unwrap()).unwrap_or(-1.0);

    let dir = std::env::temp_dir().join(format!("cltr-calibrate-corpus-{rel_frac}-{docs}-{noise_sd}"));
    std::fs::create_dir_all(&dir).unwrap();
    write_piecewise_letor(&dir, 2000, docs, 12, 777, rel_frac, noise_sd);
    eprintln!("corpus at {}", dir.display());

    let mut cfg = ExperimentConfig::default();
    cfg.corpus = CorpusConfig {
        source: "letor".into(),
        letor_dir: Some(dir),
        ..CorpusConfig::default()
    };
    cfg.grid.methods = Method::ALL.to_vec();
    cfg.forest.min_leaf_per_arm = min_leaf_per_arm;
    cfg.forest.subsample_fraction = subsample;
    cfg.forest.n_candidate_features = ncf;
    cfg.forest.honest = honest;
    cfg.forest.max_depth = max_depth;
    cfg.xl_base.min_leaf = xl_min_leaf;
    cfg.xl_base.max_depth = xl_depth;
    cfg.xl_base.n_trees = xl_trees;
    if xl_g >= 0.0 {
        cfg.xl_g = Some(xl_g);
    }
    cfg.cpbm.epochs = cpbm_epochs;
    cfg.cpbm.batch_size = batch;
    cfg.cpbm.lr_decay_epochs = decay;

    if corner == "probe" {
        probe_sparse(&cfg, n_seeds as usize);
        return;
    }

    let corners: Vec<(f64, f64)> = match corner.as_str() {
        "sparse" => vec![(5.0, 0.01)],
        "sparse10" => vec![(5.0, 0.10)],
        "sparse15" => vec![(5.0, 0.15)],
        "dense" => vec![(50.0, 1.0)],
        _ => vec![(5.0, 0.01), (50.0, 1.0)],
    };
    for (avg, pct) in corners {
        cfg.grid.avg_searches_per_query = vec![avg];
        cfg.grid.pct_training_queries = vec![pct];
        println!(
            "=== corner avg={avg} pct={pct} (mla={min_leaf_per_arm} sub={subsample} epochs={cpbm_epochs} xl_ml={xl_min_leaf})"
        );
        for run in 0..n_seeds as usize {
            let t0 = std::time::Instant::now();
            let outcome = run_cell(&cfg, 0, avg, pct, run);
            for r in &outcome.reports {
                println!(
                    "run={run} {:<22} rmse={:.4} r0={:.4} r1={:.4} ndcg={:.4}  [{:.1}s]",
                    r.method,
                    r.rmse,
                    r.rmse_r0,
                    r.rmse_r1,
                    r.ndcg10,
                    t0.elapsed().as_secs_f64()
                );
            }
            for (m, e) in &outcome.errors {
                println!("run={run} {m} ERROR: {e}");
            }
        }
    }
}

fn count_internal(node: &TreeNode) -> usize {
    match node {
        TreeNode::Leaf { .. } => 0,
        TreeNode::Internal { left, right, .. } => 1 + count_internal(left) + count_internal(right),
    }
}

/// Dissect the sparse corner: dataset sizes, tree structure, the
/// best-constant floor, and where each method's error comes from.
fn probe_sparse(cfg: &ExperimentConfig, n_seeds: usize) {
    let (avg, pct) = (5.0, 0.01);
    for run in 0..n_seeds {
        let seed = |name: &str| cell_seed(cfg.grid.base_seed, 0, run, name);
        let corpus = load_or_generate_corpus(cfg, seed("corpus")).unwrap();
        let context = select_context_features(
            &corpus.train,
            &corpus.validation,
            cfg.click.n_context_features.min(corpus.feature_dim),
            seed("context-selection"),
        )
        .unwrap();
        let ranker =
            train_production_ranker(&corpus, cfg.production_fraction, &cfg.ltr, seed("production-ranker"))
                .unwrap();
        let pool_all = corpus.train_and_validation();
        let pool = subsample_queries(&pool_all, pct, seed("query-subsample")).unwrap();
        let mut params = ClickModelParams::draw(context.len(), seed("click-model"));
        params.k_max = cfg.click.k_max;
        params.noise_click_prob = cfg.click.noise_click_prob;
        let log = run_simulation(&pool, &ranker, &params, &context, avg, seed("simulation")).unwrap();
        let oracle = TrueTauOracle::new(corpus.test.iter(), &context, params.clone());

        // true-tau stats over the test set
        let mut taus: Vec<f64> = Vec::new();
        for g in &corpus.test {
            for d in &g.documents {
                for k in 2..=cfg.click.k_max {
                    taus.push(oracle.true_tau(&g.query_id, d.doc_index, k).unwrap());
                }
            }
        }
        let mean_tau = taus.iter().sum::<f64>() / taus.len() as f64;
        let var_tau = taus.iter().map(|t| (t - mean_tau) * (t - mean_tau)).sum::<f64>() / taus.len() as f64;

        println!(
            "run={run} test mean(tau*)={mean_tau:.3} std={:.3} best-constant-rmse={:.3}",
            var_tau.sqrt(),
            var_tau.sqrt()
        );

        for k in [2usize, 5, 10] {
            match build_hte_dataset(&log, k, seed("probe")) {
                Ok(data) => {
                    let xs: Vec<Vec<f64>> = data.rows.iter().map(|r| r.x.clone()).collect();
                    let ys: Vec<f64> = data.rows.iter().map(|r| r.y).collect();
                    let ps: Vec<u8> = data.rows.iter().map(|r| r.p).collect();
                    let forest = CausalForest::fit(&xs, &ys, &ps, &cfg.forest.clone().with_seed(1));
                    match forest {
                        Ok(f) => {
                            let splits: usize = f.trees().iter().map(count_internal).sum();
                            // rmse of this one forest vs truth at position k
                            let mut sum = 0.0;
                            let mut n = 0usize;
                            for g in &corpus.test {
                                for d in &g.documents {
                                    let x = d.context(&context);
                                    let err = f.predict(&x) - oracle.true_tau(&g.query_id, d.doc_index, k).unwrap();
                                    sum += err * err;
                                    n += 1;
                                }
                            }
                            println!(
                                "  k={k}: rows={} treated={:.2} splits/tree={:.1} global_tau={:.3} rmse_k={:.3}",
                                data.rows.len(),
                                data.treated_fraction(),
                                splits as f64 / f.trees().len() as f64,
                                f.global_tau(),
                                (sum / n as f64).sqrt()
                            );
                        }
                        Err(e) => println!("  k={k}: rows={} fit error {e}", data.rows.len()),
                    }
                }
                Err(e) => println!("  k={k}: dataset error {e}"),
            }
        }
    }
}
