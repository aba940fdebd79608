//! `cltr` — counterfactual learning-to-rank experiment runner.
//!
//! Subcommands: `run` (full condition grid), `simulate` (click logs only),
//! `estimate` (fit an estimator from an impression log), `eval` (metrics
//! from saved models), `plot-data` (figure-data files from a finished run).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cltr_core::clicksim::{read_impressions, run_simulation, write_contexts, write_impressions, ClickModelParams};
use cltr_core::corpus::{select_context_features, subsample_queries};
use cltr_core::cpbm::{build_cpbm_dataset, fit_cpbm, CpbmNetworks};
use cltr_core::eval::{ndcg_at_10, tau_rmse, TrueTauOracle};
use cltr_core::experiment::{
    emit_plot_data, load_model, load_or_generate_corpus, run_experiment, save_model, ExperimentConfig,
    Method, PlotKind, SimManifest, BANK_FORMAT, CPBM_FORMAT,
};
use cltr_core::hte::{fit_bank, BankConfig, BankMethod, TauEstimatorBank};
use cltr_core::ltr::{train_production_ranker, LinearRankModel};
use cltr_core::seeding::cell_seed;

#[derive(Parser)]
#[command(
    name = "cltr",
    about = "Counterfactual learning-to-rank experimentation toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CommonOpts {
    /// TOML config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, env = "CLTR_OUT_DIR", default_value = "cltr-out", global = true)]
    out: PathBuf,

    /// Base seed for every derived RNG stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct CorpusOpts {
    /// Number of synthetic queries.
    #[arg(long)]
    synthetic_queries: Option<usize>,

    /// Documents per synthetic query.
    #[arg(long)]
    docs_per_query: Option<usize>,

    /// Synthetic feature dimension.
    #[arg(long)]
    feature_dim: Option<usize>,

    /// LETOR directory with train.txt, vali.txt, test.txt (switches the
    /// corpus source to `letor`).
    #[arg(long)]
    letor_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full experiment grid and write results CSVs.
    Run {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        corpus: CorpusOpts,

        /// Use the paper-shaped grid ({5,10,25,50} x {0.01,0.1,0.5,1.0} x 3 runs).
        #[arg(long)]
        preset_paper: bool,

        /// Comma-separated avg searches/query grid, e.g. `5,25`.
        #[arg(long, value_delimiter = ',')]
        avg_searches: Option<Vec<f64>>,

        /// Comma-separated training-query fractions, e.g. `0.1,1.0`.
        #[arg(long, value_delimiter = ',')]
        pct_queries: Option<Vec<f64>>,

        /// Runs per condition.
        #[arg(long)]
        runs: Option<usize>,

        /// Comma-separated method subset (cpbm_ltr, cpbm_clipped_ips_ltr,
        /// causal_forest_ltr, x_learner_ltr).
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,

        /// Write the per-document click-rate dump (needed for
        /// `plot-data --kind ctr_distributions`).
        #[arg(long)]
        dump_ctr: bool,

        /// Record real wall-clock seconds (makes results.csv
        /// non-reproducible across executions).
        #[arg(long)]
        timing: bool,
    },

    /// Simulate intervention clicks and export the impression log.
    Simulate {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        corpus: CorpusOpts,

        /// Average searches per query.
        #[arg(long, default_value_t = 10.0)]
        avg_searches: f64,

        /// Fraction of train+validation queries to simulate over.
        #[arg(long, default_value_t = 1.0)]
        pct_queries: f64,
    },

    /// Fit a position-bias estimator from an exported impression log.
    Estimate {
        #[command(flatten)]
        common: CommonOpts,

        /// Impression CSV written by `simulate`.
        #[arg(long)]
        impressions: PathBuf,

        /// Context sidecar CSV written by `simulate`.
        #[arg(long)]
        contexts: PathBuf,

        /// Estimator: cpbm, causal_forest, or x_learner.
        #[arg(long)]
        method: String,

        /// Output model file (JSON).
        #[arg(long)]
        model_out: PathBuf,
    },

    /// Evaluate saved models against a simulation manifest.
    Eval {
        #[command(flatten)]
        common: CommonOpts,

        /// Manifest written by `simulate`.
        #[arg(long)]
        manifest: PathBuf,

        /// Estimator bank file from `estimate`.
        #[arg(long)]
        bank: Option<PathBuf>,

        /// CPBM model file from `estimate`.
        #[arg(long)]
        cpbm: Option<PathBuf>,

        /// Linear ranker weights file.
        #[arg(long)]
        ltr: Option<PathBuf>,
    },

    /// Derive figure-data files from a finished run's output directory.
    PlotData {
        #[command(flatten)]
        common: CommonOpts,

        /// rmse_by_condition, ndcg_box, or ctr_distributions.
        #[arg(long)]
        kind: String,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = dispatch() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            common,
            corpus,
            preset_paper,
            avg_searches,
            pct_queries,
            runs,
            methods,
            dump_ctr,
            timing,
        } => {
            let mut cfg = load_config(&common)?;
            apply_corpus_opts(&mut cfg, &corpus);
            if preset_paper {
                cfg = cfg.paper_grid();
            }
            if let Some(avg) = avg_searches {
                cfg.grid.avg_searches_per_query = avg;
            }
            if let Some(pct) = pct_queries {
                cfg.grid.pct_training_queries = pct;
            }
            if let Some(runs) = runs {
                cfg.grid.n_runs = runs;
            }
            if let Some(seed) = common.seed {
                cfg.grid.base_seed = seed;
            }
            if let Some(methods) = methods {
                cfg.grid.methods = methods
                    .iter()
                    .map(|m| Method::parse(m).map_err(anyhow::Error::from))
                    .collect::<Result<Vec<_>>>()?;
            }
            cfg.dump_ctr |= dump_ctr;
            cfg.timing |= timing;

            std::fs::create_dir_all(&common.out)?;
            std::fs::write(common.out.join("config.toml"), toml::to_string_pretty(&cfg)?)?;
            let artifacts = run_experiment(&cfg, &common.out)?;
            println!("results: {}", artifacts.results.display());
            println!("p-values: {}", artifacts.pvalues.display());
            println!("errors: {}", artifacts.errors.display());
            if let Some(dump) = artifacts.ctr_dump {
                println!("ctr dump: {}", dump.display());
            }
            Ok(())
        }

        Command::Simulate {
            common,
            corpus,
            avg_searches,
            pct_queries,
        } => {
            let mut cfg = load_config(&common)?;
            apply_corpus_opts(&mut cfg, &corpus);
            if let Some(seed) = common.seed {
                cfg.grid.base_seed = seed;
            }
            simulate_cmd(&cfg, avg_searches, pct_queries, &common.out)
        }

        Command::Estimate {
            common,
            impressions,
            contexts,
            method,
            model_out,
        } => {
            let cfg = load_config(&common)?;
            let seed = common.seed.unwrap_or(cfg.grid.base_seed);
            estimate_cmd(&cfg, &impressions, &contexts, &method, &model_out, seed)
        }

        Command::Eval {
            common,
            manifest,
            bank,
            cpbm,
            ltr,
        } => eval_cmd(&load_config(&common)?, &manifest, bank, cpbm, ltr),

        Command::PlotData { common, kind } => {
            let kind = PlotKind::parse(&kind)?;
            let path = emit_plot_data(&common.out, kind)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn load_config(common: &CommonOpts) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.grid.base_seed = seed;
    }
    Ok(cfg)
}

fn apply_corpus_opts(cfg: &mut ExperimentConfig, corpus: &CorpusOpts) {
    if let Some(n) = corpus.synthetic_queries {
        cfg.corpus.n_queries = n;
        cfg.corpus.source = "synthetic".into();
    }
    if let Some(n) = corpus.docs_per_query {
        cfg.corpus.docs_per_query = n;
    }
    if let Some(n) = corpus.feature_dim {
        cfg.corpus.feature_dim = n;
    }
    if let Some(dir) = &corpus.letor_dir {
        cfg.corpus.letor_dir = Some(dir.clone());
        cfg.corpus.source = "letor".into();
    }
}

/// Phase-a of a 1x1 grid cell, exported as files. Seeds match what `run`
/// would use for condition 0, run 0 of the same config.
fn simulate_cmd(cfg: &ExperimentConfig, avg: f64, pct: f64, out: &Path) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let base = cfg.grid.base_seed;
    let seed = |name: &str| cell_seed(base, 0, 0, name);

    let corpus = load_or_generate_corpus(cfg, seed("corpus"))?;
    let context = select_context_features(
        &corpus.train,
        &corpus.validation,
        cfg.click.n_context_features.min(corpus.feature_dim),
        seed("context-selection"),
    )?;
    let ranker = train_production_ranker(&corpus, cfg.production_fraction, &cfg.ltr, seed("production-ranker"))?;
    let pool_all = corpus.train_and_validation();
    let pool = subsample_queries(&pool_all, pct, seed("query-subsample"))?;
    let mut params = ClickModelParams::draw(context.len(), seed("click-model"));
    params.k_max = cfg.click.k_max;
    params.noise_click_prob = cfg.click.noise_click_prob;
    let log = run_simulation(&pool, &ranker, &params, &context, avg, seed("simulation"))?;

    let impressions_path = out.join("impressions.csv");
    write_impressions(&log, std::io::BufWriter::new(std::fs::File::create(&impressions_path)?))?;
    let contexts_path = out.join("contexts.csv");
    write_contexts(&log, std::io::BufWriter::new(std::fs::File::create(&contexts_path)?))?;

    let manifest = SimManifest {
        corpus: cfg.corpus.clone(),
        corpus_seed: seed("corpus"),
        context_indices: context,
        click_params: params,
        ranker,
        avg_searches_per_query: avg,
        pct_training_queries: pct,
        seed: base,
    };
    let manifest_path = out.join("sim_manifest.json");
    manifest.save(&manifest_path)?;

    println!("impressions: {}", impressions_path.display());
    println!("contexts: {}", contexts_path.display());
    println!("manifest: {}", manifest_path.display());
    println!("records: {}", log.len());
    Ok(())
}

fn estimate_cmd(
    cfg: &ExperimentConfig,
    impressions: &Path,
    contexts: &Path,
    method: &str,
    model_out: &Path,
    seed: u64,
) -> Result<()> {
    let log = read_impressions(
        std::io::BufReader::new(std::fs::File::open(impressions)?),
        std::io::BufReader::new(std::fs::File::open(contexts)?),
    )?;
    match method {
        "cpbm" => {
            let data = build_cpbm_dataset(&log, cfg.click.k_max)?;
            let mut c = cfg.cpbm.clone();
            c.seed = seed;
            let nets = fit_cpbm(&data, &c)?;
            save_model(CPBM_FORMAT, &nets, model_out)?;
        }
        "causal_forest" | "x_learner" => {
            let bank_cfg = BankConfig {
                k_max: cfg.click.k_max,
                forest: cfg.forest.clone(),
                xl_base: cfg.xl_base.clone(),
                g: None,
            };
            let bank_method = if method == "causal_forest" {
                BankMethod::CausalForest
            } else {
                BankMethod::XLearner
            };
            let bank = fit_bank(&log, bank_method, &bank_cfg, seed)?;
            save_model(BANK_FORMAT, &bank, model_out)?;
        }
        other => bail!("unknown estimator `{other}` (expected cpbm, causal_forest, or x_learner)"),
    }
    println!("wrote {}", model_out.display());
    Ok(())
}

fn eval_cmd(
    cfg: &ExperimentConfig,
    manifest_path: &Path,
    bank: Option<PathBuf>,
    cpbm: Option<PathBuf>,
    ltr: Option<PathBuf>,
) -> Result<()> {
    let manifest = SimManifest::load(manifest_path)?;
    let mut corpus_cfg = cfg.clone();
    corpus_cfg.corpus = manifest.corpus.clone();
    let corpus = load_or_generate_corpus(&corpus_cfg, manifest.corpus_seed)?;
    let oracle = TrueTauOracle::new(
        corpus.test.iter(),
        &manifest.context_indices,
        manifest.click_params.clone(),
    );
    let k_max = manifest.click_params.k_max;

    let mut rows: Vec<(String, String, f64)> = Vec::new();
    if let Some(path) = bank {
        let bank: TauEstimatorBank = load_model(BANK_FORMAT, &path)?;
        let r = tau_rmse(&bank, &oracle, &corpus.test, &manifest.context_indices, k_max)?;
        rows.push(("bank".into(), "rmse".into(), r.overall));
        rows.push(("bank".into(), "rmse_r0".into(), r.r0));
        rows.push(("bank".into(), "rmse_r1".into(), r.r1));
    }
    if let Some(path) = cpbm {
        let nets: CpbmNetworks = load_model(CPBM_FORMAT, &path)?;
        let r = tau_rmse(&nets, &oracle, &corpus.test, &manifest.context_indices, k_max)?;
        rows.push(("cpbm".into(), "rmse".into(), r.overall));
        rows.push(("cpbm".into(), "rmse_r0".into(), r.r0));
        rows.push(("cpbm".into(), "rmse_r1".into(), r.r1));
    }
    if let Some(path) = ltr {
        let model = LinearRankModel::load(&path)?;
        rows.push(("ltr".into(), "ndcg10".into(), ndcg_at_10(&model, &corpus.test)?));
    }
    if rows.is_empty() {
        bail!("nothing to evaluate; pass --bank, --cpbm, and/or --ltr");
    }
    println!("artifact,metric,value");
    for (artifact, metric, value) in rows {
        println!("{artifact},{metric},{value:.6}");
    }
    Ok(())
}
