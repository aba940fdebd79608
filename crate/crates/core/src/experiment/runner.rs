//! Grid execution: per-cell pipeline, result collection, p-values.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rayon::prelude::*;

use crate::clicksim::{run_simulation, ClickModelParams, ImpressionRecord};
use crate::corpus::{
    generate_synthetic_corpus, load_letor_dir, normalize_features, select_context_features,
    subsample_queries, CorpusSplit, QueryGroup,
};
use crate::cpbm::{build_cpbm_dataset, fit_cpbm, CpbmNetworks};
use crate::debias::{
    correct_and_resample, ips_weights, make_training_lists, CorrectedExample, TrainingSource,
};
use crate::error::{Error, Result};
use crate::eval::{ndcg_at_10, tau_rmse, MetricReport, TauRmse, TrueTauOracle};
use crate::hte::{fit_bank, BankConfig, BankMethod, TauEstimatorBank, TauSource};
use crate::ltr::{expand_pairs, train_pairwise, train_production_ranker};
use crate::seeding::cell_seed;

use super::{ExperimentConfig, Method};

/// One long-format row of the per-document click-rate dump.
#[derive(Debug, Clone)]
pub struct CtrRow {
    pub avg_searches: f64,
    pub pct_queries: f64,
    pub run: usize,
    pub query_id: String,
    pub doc_index: usize,
    pub true_rel: u8,
    pub n_obs: usize,
    /// `observed`, `true_model`, `theta_causal_forest`, `theta_x_learner`,
    /// or `ips_weighted_cpbm`.
    pub kind: &'static str,
    pub value: f64,
    pub false_negative: bool,
    pub false_positive: bool,
}

/// Everything one grid cell produced.
#[derive(Debug, Default)]
pub struct CellOutcome {
    pub reports: Vec<MetricReport>,
    /// (method name, error message) pairs for failed methods.
    pub errors: Vec<(String, String)>,
    pub ctr_rows: Vec<CtrRow>,
}

/// Paths of the files a run wrote.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub results: PathBuf,
    pub pvalues: PathBuf,
    pub errors: PathBuf,
    pub ctr_dump: Option<PathBuf>,
}

/// Load or generate the cell corpus (normalized, context features not yet
/// selected). LETOR corpora are parsed once per directory and shared.
pub fn load_or_generate_corpus(cfg: &ExperimentConfig, seed: u64) -> Result<Arc<CorpusSplit>> {
    match cfg.corpus.source.as_str() {
        "synthetic" => {
            let split = generate_synthetic_corpus(
                cfg.corpus.n_queries,
                cfg.corpus.docs_per_query,
                cfg.corpus.feature_dim,
                seed,
            )?;
            Ok(Arc::new(normalize_features(split)))
        }
        "letor" => {
            static CACHE: OnceLock<Mutex<HashMap<PathBuf, Arc<CorpusSplit>>>> = OnceLock::new();
            let dir = cfg
                .corpus
                .letor_dir
                .clone()
                .ok_or_else(|| Error::Validation("letor source needs corpus.letor_dir".into()))?;
            let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
            if let Some(hit) = cache.lock().unwrap().get(&dir) {
                return Ok(hit.clone());
            }
            let split = Arc::new(normalize_features(load_letor_dir(&dir)?));
            cache.lock().unwrap().insert(dir, split.clone());
            Ok(split)
        }
        other => Err(Error::Validation(format!("unknown corpus source `{other}`"))),
    }
}

struct FittedEstimators {
    cpbm: Option<CpbmNetworks>,
    cpbm_error: Option<String>,
    cf_bank: Option<TauEstimatorBank>,
    cf_error: Option<String>,
    xl_bank: Option<TauEstimatorBank>,
    xl_error: Option<String>,
}

/// Run one grid cell. Shared-stage failures produce an error entry for
/// every configured method; method-specific failures only mark that method.
pub fn run_cell(
    cfg: &ExperimentConfig,
    cond_index: usize,
    avg: f64,
    pct: f64,
    run: usize,
) -> CellOutcome {
    let started = Instant::now();
    let mut outcome = CellOutcome::default();
    match cell_inner(cfg, cond_index, avg, pct, run, &mut outcome) {
        Ok(()) => {}
        Err(e) => {
            let msg = e.to_string();
            for m in &cfg.grid.methods {
                outcome.errors.push((m.name().to_string(), msg.clone()));
            }
        }
    }
    if cfg.timing {
        let secs = started.elapsed().as_secs_f64();
        for report in &mut outcome.reports {
            report.wallclock_s = secs;
        }
    }
    outcome
}

fn cell_inner(
    cfg: &ExperimentConfig,
    ci: usize,
    avg: f64,
    pct: f64,
    run: usize,
    outcome: &mut CellOutcome,
) -> Result<()> {
    let base = cfg.grid.base_seed;
    let seed = |name: &str| cell_seed(base, ci, run, name);

    // Shared stages: corpus, context features, production ranker, clicks.
    let corpus = load_or_generate_corpus(cfg, seed("corpus"))?;
    let context = select_context_features(
        &corpus.train,
        &corpus.validation,
        cfg.click.n_context_features.min(corpus.feature_dim),
        seed("context-selection"),
    )?;
    let ranker = train_production_ranker(
        &corpus,
        cfg.production_fraction,
        &cfg.ltr,
        seed("production-ranker"),
    )?;
    let pool_all = corpus.train_and_validation();
    let pool = subsample_queries(&pool_all, pct, seed("query-subsample"))?;
    let mut params = ClickModelParams::draw(context.len(), seed("click-model"));
    params.k_max = cfg.click.k_max;
    params.noise_click_prob = cfg.click.noise_click_prob;
    let log = run_simulation(&pool, &ranker, &params, &context, avg, seed("simulation"))?;

    // The debiased rankers train on the control arm by default; the
    // all-arms variant relabels every impression as control so the same
    // grouping path applies.
    let ltr_log: Vec<ImpressionRecord> = if cfg.ltr_all_arms {
        log.iter()
            .map(|r| ImpressionRecord {
                arm: 1,
                ..r.clone()
            })
            .collect()
    } else {
        log.iter().filter(|r| r.arm == 1).cloned().collect()
    };

    let estimators = fit_estimators(cfg, &log, &seed);
    let group_lookup: HashMap<&str, &QueryGroup> =
        pool.iter().map(|g| (g.query_id.as_str(), g)).collect();
    let oracle = TrueTauOracle::new(
        corpus.test.iter().chain(pool.iter()),
        &context,
        params.clone(),
    );

    let mut corrected_cf: Option<Vec<CorrectedExample>> = None;
    let mut corrected_xl: Option<Vec<CorrectedExample>> = None;

    for method in &cfg.grid.methods {
        let result = run_method(
            cfg,
            *method,
            &estimators,
            &ltr_log,
            &group_lookup,
            &oracle,
            &corpus,
            &context,
            &seed,
            &mut corrected_cf,
            &mut corrected_xl,
        );
        match result {
            Ok((rmse, ndcg)) => outcome.reports.push(MetricReport {
                method: method.name().to_string(),
                avg_searches: avg,
                pct_queries: pct,
                run,
                rmse: rmse.overall,
                rmse_r0: rmse.r0,
                rmse_r1: rmse.r1,
                ndcg10: ndcg,
                wallclock_s: 0.0,
            }),
            Err(e) => outcome.errors.push((method.name().to_string(), e.to_string())),
        }
    }

    if cfg.dump_ctr {
        outcome.ctr_rows = ctr_rows(
            avg,
            pct,
            run,
            &ltr_log,
            &estimators,
            &oracle,
            corrected_cf.as_deref(),
            corrected_xl.as_deref(),
            &seed,
        );
    }
    Ok(())
}

fn fit_estimators(
    cfg: &ExperimentConfig,
    log: &[ImpressionRecord],
    seed: &dyn Fn(&str) -> u64,
) -> FittedEstimators {
    let methods = &cfg.grid.methods;
    let need_cpbm = methods.contains(&Method::CpbmLtr) || methods.contains(&Method::CpbmClippedIpsLtr);
    let need_cf = methods.contains(&Method::CausalForestLtr);
    let need_xl = methods.contains(&Method::XLearnerLtr);

    let mut out = FittedEstimators {
        cpbm: None,
        cpbm_error: None,
        cf_bank: None,
        cf_error: None,
        xl_bank: None,
        xl_error: None,
    };
    if need_cpbm {
        let fitted = build_cpbm_dataset(log, cfg.click.k_max).and_then(|data| {
            let mut c = cfg.cpbm.clone();
            c.seed = seed("cpbm");
            fit_cpbm(&data, &c)
        });
        match fitted {
            Ok(nets) => out.cpbm = Some(nets),
            Err(e) => out.cpbm_error = Some(e.to_string()),
        }
    }
    let bank_cfg = BankConfig {
        k_max: cfg.click.k_max,
        forest: cfg.forest.clone(),
        xl_base: cfg.xl_base.clone(),
        g: cfg.xl_g,
    };
    if need_cf {
        match fit_bank(log, BankMethod::CausalForest, &bank_cfg, seed("causal-forest-bank")) {
            Ok(bank) => out.cf_bank = Some(bank),
            Err(e) => out.cf_error = Some(e.to_string()),
        }
    }
    if need_xl {
        match fit_bank(log, BankMethod::XLearner, &bank_cfg, seed("x-learner-bank")) {
            Ok(bank) => out.xl_bank = Some(bank),
            Err(e) => out.xl_error = Some(e.to_string()),
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn run_method(
    cfg: &ExperimentConfig,
    method: Method,
    estimators: &FittedEstimators,
    ltr_log: &[ImpressionRecord],
    group_lookup: &HashMap<&str, &QueryGroup>,
    oracle: &TrueTauOracle,
    corpus: &CorpusSplit,
    context: &[usize],
    seed: &dyn Fn(&str) -> u64,
    corrected_cf: &mut Option<Vec<CorrectedExample>>,
    corrected_xl: &mut Option<Vec<CorrectedExample>>,
) -> Result<(TauRmse, f64)> {
    let k_max = cfg.click.k_max;
    let (estimator, lists): (&dyn TauSource, _) = match method {
        Method::CpbmLtr | Method::CpbmClippedIpsLtr => {
            let nets = estimators
                .cpbm
                .as_ref()
                .ok_or_else(|| Error::Fit(estimators.cpbm_error.clone().unwrap_or_default()))?;
            let clip = match method {
                Method::CpbmClippedIpsLtr => Some((cfg.ips_clip_lo, cfg.ips_clip_hi)),
                _ => None,
            };
            let weights = ips_weights(ltr_log, nets, clip)?;
            let lists = make_training_lists(
                TrainingSource::Ips {
                    weights: &weights,
                    log: ltr_log,
                },
                group_lookup,
            );
            (nets, lists)
        }
        Method::CausalForestLtr => {
            let bank = estimators
                .cf_bank
                .as_ref()
                .ok_or_else(|| Error::Fit(estimators.cf_error.clone().unwrap_or_default()))?;
            let corrected = corrected_cf.get_or_insert_with(|| {
                correct_and_resample(ltr_log, bank, seed("resample-causal-forest"))
            });
            let lists = make_training_lists(TrainingSource::Resampled(corrected), group_lookup);
            (bank, lists)
        }
        Method::XLearnerLtr => {
            let bank = estimators
                .xl_bank
                .as_ref()
                .ok_or_else(|| Error::Fit(estimators.xl_error.clone().unwrap_or_default()))?;
            let corrected = corrected_xl.get_or_insert_with(|| {
                correct_and_resample(ltr_log, bank, seed("resample-x-learner"))
            });
            let lists = make_training_lists(TrainingSource::Resampled(corrected), group_lookup);
            (bank, lists)
        }
    };

    let pairs = expand_pairs(&lists);
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{method}: no training pairs after debiasing"
        )));
    }
    let model = train_pairwise(
        &pairs,
        cfg.ltr.l2,
        cfg.ltr.lr,
        cfg.ltr.epochs,
        seed(&format!("ltr-{method}")),
    )?;

    let rmse = tau_rmse(estimator, oracle, &corpus.test, context, k_max)?;
    let ndcg = ndcg_at_10(&model, &corpus.test)?;
    Ok((rmse, ndcg))
}

struct ZeroTau;
impl TauSource for ZeroTau {
    fn tau_at(&self, _q: &str, _d: usize, _x: &[f64], _k: usize) -> f64 {
        0.0
    }
}

#[allow(clippy::too_many_arguments)]
fn ctr_rows(
    avg: f64,
    pct: f64,
    run: usize,
    ltr_log: &[ImpressionRecord],
    estimators: &FittedEstimators,
    oracle: &TrueTauOracle,
    corrected_cf: Option<&[CorrectedExample]>,
    corrected_xl: Option<&[CorrectedExample]>,
    seed: &dyn Fn(&str) -> u64,
) -> Vec<CtrRow> {
    // The zero-effect pass gives the observed groups; theta passes align
    // with it because grouping order is a pure function of the log.
    let base = correct_and_resample(ltr_log, &ZeroTau, seed("ctr-base"));
    let mut rows = Vec::new();
    let mut emit = |ex: &CorrectedExample, kind: &'static str, value: f64, rel: u8| {
        rows.push(CtrRow {
            avg_searches: avg,
            pct_queries: pct,
            run,
            query_id: ex.query_id.clone(),
            doc_index: ex.doc_index,
            true_rel: rel,
            n_obs: ex.n_obs,
            kind,
            value,
            false_negative: rel == 1 && ex.ctr_obs == 0.0,
            false_positive: rel == 0 && ex.ctr_obs > 0.0,
        });
    };

    for (i, ex) in base.iter().enumerate() {
        let rel = oracle.relevance(&ex.query_id, ex.doc_index).unwrap_or(0);
        emit(ex, "observed", ex.ctr_obs, rel);
        if let Ok(p) = oracle.true_click_prob(&ex.query_id, ex.doc_index, ex.position) {
            emit(ex, "true_model", p, rel);
        }
        if let Some(cf) = corrected_cf {
            debug_assert_eq!(cf[i].doc_index, ex.doc_index);
            emit(ex, "theta_causal_forest", cf[i].theta, rel);
        }
        if let Some(xl) = corrected_xl {
            emit(ex, "theta_x_learner", xl[i].theta, rel);
        }
        if let Some(nets) = &estimators.cpbm {
            if let Ok(p) = nets.predict_propensity(&ex.x, ex.position) {
                emit(ex, "ips_weighted_cpbm", ex.ctr_obs / p, rel);
            }
        }
    }
    rows
}

/// Run the whole grid and write `results.csv`, `pvalues.csv`, `errors.csv`
/// (and `ctr_dump.csv` when enabled) under `out_dir`.
///
/// Cells execute in parallel; rows are written by a single collector in
/// deterministic (condition, run, method) order. One failed cell records
/// error rows and the grid continues.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let conditions = cfg.conditions();
    let cells: Vec<(usize, f64, f64, usize)> = conditions
        .iter()
        .flat_map(|&(ci, avg, pct)| (0..cfg.grid.n_runs).map(move |run| (ci, avg, pct, run)))
        .collect();

    let outcomes: Vec<CellOutcome> = cells
        .par_iter()
        .map(|&(ci, avg, pct, run)| run_cell(cfg, ci, avg, pct, run))
        .collect();

    // results.csv
    let results_path = out_dir.join("results.csv");
    let mut results = std::io::BufWriter::new(std::fs::File::create(&results_path)?);
    writeln!(
        results,
        "method,avg_searches,pct_queries,run,rmse,rmse_r0,rmse_r1,ndcg10,wallclock_s"
    )?;
    for outcome in &outcomes {
        for r in &outcome.reports {
            writeln!(
                results,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.method, r.avg_searches, r.pct_queries, r.run, r.rmse, r.rmse_r0, r.rmse_r1, r.ndcg10, r.wallclock_s
            )?;
        }
    }
    drop(results);

    // errors.csv (always written; header-only when everything succeeded)
    let errors_path = out_dir.join("errors.csv");
    let mut errors = std::io::BufWriter::new(std::fs::File::create(&errors_path)?);
    writeln!(errors, "method,avg_searches,pct_queries,run,error")?;
    for (outcome, &(_, avg, pct, run)) in outcomes.iter().zip(&cells) {
        for (method, msg) in &outcome.errors {
            let clean = msg.replace([',', '\n'], " ");
            writeln!(errors, "{method},{avg},{pct},{run},{clean}")?;
        }
    }
    drop(errors);

    // pvalues.csv: Welch test of each method's nDCG@10 runs against
    // cpbm_ltr's, per condition.
    let pvalues_path = out_dir.join("pvalues.csv");
    let mut pvalues = std::io::BufWriter::new(std::fs::File::create(&pvalues_path)?);
    writeln!(pvalues, "method,avg_searches,pct_queries,p_vs_cpbm_ltr")?;
    if cfg.grid.methods.contains(&Method::CpbmLtr) {
        let mut ndcg_samples: HashMap<(usize, &str), Vec<f64>> = HashMap::new();
        for (outcome, &(ci, _, _, _)) in outcomes.iter().zip(&cells) {
            for r in &outcome.reports {
                ndcg_samples
                    .entry((ci, r.method.as_str()))
                    .or_default()
                    .push(r.ndcg10);
            }
        }
        for &(ci, avg, pct) in &conditions {
            let Some(reference) = ndcg_samples.get(&(ci, Method::CpbmLtr.name())) else {
                continue;
            };
            for method in &cfg.grid.methods {
                if *method == Method::CpbmLtr {
                    continue;
                }
                let p = match ndcg_samples.get(&(ci, method.name())) {
                    Some(sample) => match crate::eval::welch_t_test(sample, reference) {
                        Ok((_, _, p)) => p,
                        Err(_) => f64::NAN,
                    },
                    None => f64::NAN,
                };
                writeln!(pvalues, "{},{avg},{pct},{p:.6}", method.name())?;
            }
        }
    }
    drop(pvalues);

    // ctr_dump.csv
    let ctr_dump = if cfg.dump_ctr {
        let path = out_dir.join("ctr_dump.csv");
        let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(
            w,
            "avg_searches,pct_queries,run,query_id,doc_index,true_rel,n_obs,kind,value,false_negative,false_positive"
        )?;
        for outcome in &outcomes {
            for r in &outcome.ctr_rows {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{:.6},{},{}",
                    r.avg_searches,
                    r.pct_queries,
                    r.run,
                    r.query_id,
                    r.doc_index,
                    r.true_rel,
                    r.n_obs,
                    r.kind,
                    r.value,
                    u8::from(r.false_negative),
                    u8::from(r.false_positive)
                )?;
            }
        }
        Some(path)
    } else {
        None
    };

    Ok(RunArtifacts {
        results: results_path,
        pvalues: pvalues_path,
        errors: errors_path,
        ctr_dump,
    })
}
