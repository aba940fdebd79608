//! Per-position treatment-effect estimation.
//!
//! Builds `(x, y, p)` datasets from intervention logs — `p = 1` marks a
//! (query, document) pair whose sampled observation was at position 1,
//! `p = 0` one observed at position k — and fits one estimator per
//! position `k` in `{2..k_max}`: either a causal forest or an X-learner on
//! regression-forest bases.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clicksim::ImpressionRecord;
use crate::error::{Error, Result};
use crate::forest::{CausalForest, ForestConfig, RegressionForest};
use crate::seeding::{mix_index, mix_tag, rng};

/// Anything that can produce a treatment-effect estimate for a
/// (query, document) at position k. The identifiers let oracle
/// implementations look up ground truth; model-based implementations use
/// only the context vector.
pub trait TauSource {
    fn tau_at(&self, query_id: &str, doc_index: usize, x: &[f64], k: usize) -> f64;
}

/// One treatment-effect training row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HteRow {
    pub x: Vec<f64>,
    /// Click rate at the sampled position, in `[0, 1]`.
    pub y: f64,
    /// 1 if the sampled position was 1, 0 if it was k.
    pub p: u8,
}

/// The position-k dataset: one row per unique (query, document) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HteDataset {
    pub position_k: usize,
    pub rows: Vec<HteRow>,
}

impl HteDataset {
    pub fn treated_fraction(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.p == 1).count() as f64 / self.rows.len() as f64
    }

    /// Export as CSV (`x_0..x_{t-1},y,p`).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let t = self.rows.first().map_or(0, |r| r.x.len());
        for j in 0..t {
            write!(w, "x_{j},")?;
        }
        writeln!(w, "y,p")?;
        for row in &self.rows {
            for v in &row.x {
                write!(w, "{v},")?;
            }
            writeln!(w, "{},{}", row.y, row.p)?;
        }
        Ok(())
    }
}

/// Build the position-k dataset from an intervention log.
///
/// Restricts the log to arms {1, k}, groups by unique (query, document),
/// keeps pairs observed at position 1 and/or k, and — when a pair was
/// observed at both — samples one of the two positions uniformly (seeded
/// per pair). `y` is the click rate at the sampled position.
pub fn build_hte_dataset(log: &[ImpressionRecord], k: usize, seed: u64) -> Result<HteDataset> {
    if k < 2 {
        return Err(Error::Validation(format!("position k must be >= 2, got {k}")));
    }
    struct Counts {
        context: Vec<f64>,
        at1: (usize, usize),
        at_k: (usize, usize),
    }
    let mut order: Vec<(String, usize)> = Vec::new();
    let mut groups: HashMap<(String, usize), Counts> = HashMap::new();
    for rec in log {
        if rec.arm != 1 && rec.arm != k {
            continue;
        }
        if rec.position != 1 && rec.position != k {
            continue;
        }
        let key = (rec.query_id.clone(), rec.doc_index);
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Counts {
                context: rec.context.clone(),
                at1: (0, 0),
                at_k: (0, 0),
            }
        });
        let slot = if rec.position == 1 { &mut entry.at1 } else { &mut entry.at_k };
        slot.0 += 1;
        slot.1 += usize::from(rec.clicked == 1);
    }

    let mut rows = Vec::with_capacity(order.len());
    for (qid, doc) in &order {
        let counts = &groups[&(qid.clone(), *doc)];
        let (n1, c1) = counts.at1;
        let (nk, ck) = counts.at_k;
        let pick_position_1 = match (n1 > 0, nk > 0) {
            (true, false) => true,
            (false, true) => false,
            (true, true) => {
                use rand::Rng;
                let mut r = rng(mix_index(mix_tag(seed, qid), *doc as u64));
                r.random::<f64>() < 0.5
            }
            (false, false) => unreachable!("grouped rows have at least one observation"),
        };
        let (y, p) = if pick_position_1 {
            (c1 as f64 / n1 as f64, 1u8)
        } else {
            (ck as f64 / nk as f64, 0u8)
        };
        rows.push(HteRow {
            x: counts.context.clone(),
            y,
            p,
        });
    }

    let dataset = HteDataset { position_k: k, rows };
    let treated = dataset.rows.iter().filter(|r| r.p == 1).count();
    if dataset.rows.is_empty() || treated == 0 || treated == dataset.rows.len() {
        return Err(Error::DegenerateDataset(format!(
            "position {k}: {} rows, {treated} treated",
            dataset.rows.len()
        )));
    }
    Ok(dataset)
}

/// X-learner on regression-forest base models.
///
/// Step 1 fits per-arm outcome models, step 2 regresses on imputed
/// per-row effects, step 3 blends the two effect models with weight `g`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct XLearner {
    tau_control: RegressionForest,
    tau_treated: RegressionForest,
    /// Blend weight on the control-side effect model; defaults to the
    /// treated fraction of the training data (the propensity of treatment
    /// assignment, which is constant under the uniform-arm simulator).
    pub g: f64,
}

impl XLearner {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.g * self.tau_control.predict(x) + (1.0 - self.g) * self.tau_treated.predict(x)
    }
}

/// Fit an X-learner. `g = None` uses the dataset's treated fraction.
pub fn fit_x_learner(
    data: &HteDataset,
    base_cfg: &ForestConfig,
    g: Option<f64>,
    seed: u64,
) -> Result<XLearner> {
    let (mut x1, mut y1, mut x0, mut y0) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for row in &data.rows {
        if row.p == 1 {
            x1.push(row.x.clone());
            y1.push(row.y);
        } else {
            x0.push(row.x.clone());
            y0.push(row.y);
        }
    }
    if x1.is_empty() || x0.is_empty() {
        return Err(Error::Fit("x-learner needs both arms".into()));
    }
    if let Some(g) = g {
        if !(0.0..=1.0).contains(&g) {
            return Err(Error::Validation(format!("g must lie in [0, 1], got {g}")));
        }
    }

    let mu0 = RegressionForest::fit(&x0, &y0, &base_cfg.clone().with_seed(mix_tag(seed, "mu0")))?;
    let mu1 = RegressionForest::fit(&x1, &y1, &base_cfg.clone().with_seed(mix_tag(seed, "mu1")))?;

    // imputed effects: control rows use mu1(x) - y, treated rows y - mu0(x)
    let d0: Vec<f64> = x0.iter().zip(&y0).map(|(x, y)| mu1.predict(x) - y).collect();
    let d1: Vec<f64> = x1.iter().zip(&y1).map(|(x, y)| y - mu0.predict(x)).collect();

    let tau_control =
        RegressionForest::fit(&x0, &d0, &base_cfg.clone().with_seed(mix_tag(seed, "tau0")))?;
    let tau_treated =
        RegressionForest::fit(&x1, &d1, &base_cfg.clone().with_seed(mix_tag(seed, "tau1")))?;

    Ok(XLearner {
        tau_control,
        tau_treated,
        g: g.unwrap_or(data.treated_fraction()),
    })
}

/// Which estimator family a bank uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BankMethod {
    CausalForest,
    XLearner,
}

/// One fitted per-position estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TauEstimator {
    Forest(CausalForest),
    XLearner(XLearner),
    /// Fallback when the position's fit failed: a constant difference of
    /// arm means (0 when the dataset itself was unusable).
    Constant(f64),
}

impl TauEstimator {
    fn predict(&self, x: &[f64]) -> f64 {
        match self {
            TauEstimator::Forest(f) => f.predict(x),
            TauEstimator::XLearner(xl) => xl.predict(x),
            TauEstimator::Constant(c) => *c,
        }
    }
}

/// Estimator-bank configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankConfig {
    pub k_max: usize,
    /// Causal-forest settings (used when the method is `CausalForest`).
    pub forest: ForestConfig,
    /// Regression-forest base settings for the X-learner.
    pub xl_base: ForestConfig,
    /// Fixed X-learner blend weight; `None` uses the treated fraction.
    pub g: Option<f64>,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            k_max: 10,
            forest: ForestConfig::causal_default(),
            xl_base: ForestConfig::regression_default(),
            g: None,
        }
    }
}

/// K-1 per-position treatment-effect estimators with a uniform predict
/// interface.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TauEstimatorBank {
    pub estimators: BTreeMap<usize, TauEstimator>,
    pub method: BankMethod,
    pub k_max: usize,
    /// Positions whose fit failed, with the reason; predictions there use
    /// the constant fallback.
    pub failures: Vec<(usize, String)>,
}

impl TauEstimatorBank {
    /// Effect estimate for position `k`; position 1 is 0 by definition.
    pub fn predict(&self, x: &[f64], k: usize) -> Result<f64> {
        if k == 0 || k > self.k_max {
            return Err(Error::Validation(format!(
                "position {k} outside 1..={}",
                self.k_max
            )));
        }
        if k == 1 {
            return Ok(0.0);
        }
        Ok(self.estimators[&k].predict(x))
    }
}

impl TauSource for TauEstimatorBank {
    fn tau_at(&self, _query_id: &str, _doc_index: usize, x: &[f64], k: usize) -> f64 {
        if k == 1 {
            return 0.0;
        }
        debug_assert!(k >= 2 && k <= self.k_max);
        self.estimators[&k].predict(x)
    }
}

/// Build all K-1 datasets from the log and fit the bank.
///
/// A failed fit for one position is recorded and replaced by the constant
/// difference of arm means over that position's dataset (0 if the dataset
/// itself was degenerate); if every position fails, the bank fails.
pub fn fit_bank(
    log: &[ImpressionRecord],
    method: BankMethod,
    cfg: &BankConfig,
    seed: u64,
) -> Result<TauEstimatorBank> {
    let per_k: Vec<(usize, std::result::Result<TauEstimator, (String, f64)>)> = (2..=cfg.k_max)
        .into_par_iter()
        .map(|k| {
            let k_seed = mix_index(mix_tag(seed, "bank"), k as u64);
            let built = build_hte_dataset(log, k, mix_tag(k_seed, "dataset"));
            let outcome = match built {
                Err(e) => Err((e.to_string(), 0.0)),
                Ok(data) => {
                    let fallback = difference_of_means(&data);
                    let fitted = fit_for(&data, method, cfg, mix_tag(k_seed, "fit"));
                    match fitted {
                        Ok(est) => Ok(est),
                        Err(e) => Err((e.to_string(), fallback)),
                    }
                }
            };
            (k, outcome)
        })
        .collect();

    let mut estimators = BTreeMap::new();
    let mut failures = Vec::new();
    for (k, outcome) in per_k {
        match outcome {
            Ok(est) => {
                estimators.insert(k, est);
            }
            Err((msg, fallback)) => {
                log::warn!("position {k} estimator failed ({msg}); using constant fallback {fallback}");
                failures.push((k, msg));
                estimators.insert(k, TauEstimator::Constant(fallback));
            }
        }
    }
    if failures.len() == cfg.k_max - 1 {
        return Err(Error::Fit(format!(
            "all {} per-position estimators failed",
            cfg.k_max - 1
        )));
    }
    Ok(TauEstimatorBank {
        estimators,
        method,
        k_max: cfg.k_max,
        failures,
    })
}

/// Fit one position's estimator from an already-built dataset.
pub fn fit_estimator(
    data: &HteDataset,
    method: BankMethod,
    cfg: &BankConfig,
    seed: u64,
) -> Result<TauEstimator> {
    fit_for(data, method, cfg, seed)
}

fn fit_for(
    data: &HteDataset,
    method: BankMethod,
    cfg: &BankConfig,
    seed: u64,
) -> Result<TauEstimator> {
    let xs: Vec<Vec<f64>> = data.rows.iter().map(|r| r.x.clone()).collect();
    let ys: Vec<f64> = data.rows.iter().map(|r| r.y).collect();
    match method {
        BankMethod::CausalForest => {
            let ps: Vec<u8> = data.rows.iter().map(|r| r.p).collect();
            let forest = CausalForest::fit(&xs, &ys, &ps, &cfg.forest.clone().with_seed(seed))?;
            Ok(TauEstimator::Forest(forest))
        }
        BankMethod::XLearner => {
            let xl = fit_x_learner(data, &cfg.xl_base, cfg.g, seed)?;
            Ok(TauEstimator::XLearner(xl))
        }
    }
}

fn difference_of_means(data: &HteDataset) -> f64 {
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    for row in &data.rows {
        if row.p == 1 {
            s1 += row.y;
            n1 += 1;
        } else {
            s0 += row.y;
            n0 += 1;
        }
    }
    if n1 == 0 || n0 == 0 {
        0.0
    } else {
        s1 / n1 as f64 - s0 / n0 as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use rand::Rng;

    fn record(qid: &str, doc: usize, pos: usize, arm: usize, clicked: u8) -> ImpressionRecord {
        ImpressionRecord {
            query_id: qid.into(),
            doc_index: doc,
            position: pos,
            arm,
            clicked,
            context: vec![0.3],
        }
    }

    #[test]
    fn single_position_groups_are_deterministic() {
        let log = vec![
            record("a", 0, 1, 1, 1),
            record("a", 0, 1, 1, 0),
            record("b", 0, 3, 3, 0),
        ];
        let data = build_hte_dataset(&log, 3, 5).unwrap();
        assert_eq!(data.rows.len(), 2);
        let treated: Vec<(u8, f64)> = data.rows.iter().map(|r| (r.p, r.y)).collect();
        assert!(treated.contains(&(1, 0.5)));
        assert!(treated.contains(&(0, 0.0)));
    }

    #[test]
    fn both_position_groups_sample_each_side() {
        // clicks 2/4 at position 1, 0/4 at position k: the sampled row is
        // (0.5, 1) or (0.0, 0), roughly half the time each across seeds.
        let mut log = Vec::new();
        for i in 0..4 {
            log.push(record("q", 7, 1, 1, u8::from(i < 2)));
            log.push(record("q", 7, 4, 4, 0));
        }
        // anchor rows so the dataset never degenerates
        log.push(record("z", 0, 1, 1, 1));
        log.push(record("z", 1, 4, 1, 0));
        let mut saw = [0usize; 2];
        for seed in 0..400 {
            let data = build_hte_dataset(&log, 4, seed).unwrap();
            let row = &data.rows[0];
            match (row.p, row.y) {
                (1, y) => {
                    assert!((y - 0.5).abs() < 1e-12);
                    saw[1] += 1;
                }
                (0, y) => {
                    assert!(y.abs() < 1e-12);
                    saw[0] += 1;
                }
                other => panic!("unexpected row {other:?}"),
            }
        }
        let frac = saw[1] as f64 / 400.0;
        assert!((0.4..=0.6).contains(&frac), "treated fraction {frac}");
    }

    #[test]
    fn row_count_matches_hand_grouping() {
        let mut rng = seeding::rng(31);
        let mut log = Vec::new();
        for q in 0..30 {
            for d in 0..6 {
                // random subset of arms/positions
                for _ in 0..rng.random_range(1..4) {
                    let arm = rng.random_range(1..=5);
                    let pos = rng.random_range(1..=5);
                    log.push(record(&q.to_string(), d, pos, arm, 0));
                }
            }
        }
        let k = 3;
        let data = build_hte_dataset(&log, k, 9).unwrap();
        use std::collections::HashSet;
        let expected: HashSet<(String, usize)> = log
            .iter()
            .filter(|r| (r.arm == 1 || r.arm == k) && (r.position == 1 || r.position == k))
            .map(|r| (r.query_id.clone(), r.doc_index))
            .collect();
        assert_eq!(data.rows.len(), expected.len());
    }

    #[test]
    fn degenerate_dataset_is_an_error() {
        let log = vec![record("a", 0, 1, 1, 1), record("b", 0, 1, 1, 0)];
        assert!(matches!(
            build_hte_dataset(&log, 2, 1),
            Err(Error::DegenerateDataset(_))
        ));
        assert!(build_hte_dataset(&[], 2, 1).is_err());
    }

    fn synthetic_dataset(n: usize, effect: f64, seed: u64) -> HteDataset {
        let mut rng = seeding::rng(seed);
        let rows = (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..2).map(|_| rng.random::<f64>()).collect();
                let p = u8::from(rng.random::<f64>() < 0.5);
                let base = 0.2 + 0.3 * x[0];
                let y = base + if p == 1 { effect } else { 0.0 };
                HteRow { x, y, p }
            })
            .collect();
        HteDataset { position_k: 2, rows }
    }

    fn base_cfg() -> ForestConfig {
        ForestConfig {
            n_trees: 30,
            ..ForestConfig::regression_default()
        }
    }

    #[test]
    fn constant_arm_outcomes_recover_the_difference() {
        let mut rng = seeding::rng(3);
        let rows: Vec<HteRow> = (0..200)
            .map(|i| HteRow {
                x: vec![rng.random()],
                y: if i % 2 == 0 { 0.9 } else { 0.2 },
                p: u8::from(i % 2 == 0),
            })
            .collect();
        let data = HteDataset { position_k: 2, rows };
        let xl = fit_x_learner(&data, &base_cfg(), None, 7).unwrap();
        for _ in 0..20 {
            let x = vec![rng.random::<f64>()];
            assert!((xl.predict(&x) - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_effect_data_stays_near_zero() {
        let data = synthetic_dataset(600, 0.0, 11);
        let xl = fit_x_learner(&data, &base_cfg(), None, 13).unwrap();
        let mut rng = seeding::rng(17);
        for _ in 0..50 {
            let x = vec![rng.random::<f64>(), rng.random::<f64>()];
            assert!(xl.predict(&x).abs() < 0.02, "tau {}", xl.predict(&x));
        }
    }

    #[test]
    fn g_endpoints_select_one_effect_model() {
        let data = synthetic_dataset(300, 0.4, 23);
        let g0 = fit_x_learner(&data, &base_cfg(), Some(0.0), 5).unwrap();
        let g1 = fit_x_learner(&data, &base_cfg(), Some(1.0), 5).unwrap();
        let x = vec![0.5, 0.5];
        assert_eq!(g1.predict(&x), g1.tau_control.predict(&x));
        assert_eq!(g0.predict(&x), g0.tau_treated.predict(&x));
        // default g equals the treated fraction
        let auto = fit_x_learner(&data, &base_cfg(), None, 5).unwrap();
        assert_eq!(auto.g, data.treated_fraction());
        let explicit = fit_x_learner(&data, &base_cfg(), Some(data.treated_fraction()), 5).unwrap();
        assert_eq!(auto.predict(&x), explicit.predict(&x));
    }

    #[test]
    fn x_learner_requires_both_arms() {
        let rows: Vec<HteRow> = (0..10)
            .map(|i| HteRow {
                x: vec![i as f64],
                y: 0.5,
                p: 1,
            })
            .collect();
        let data = HteDataset { position_k: 2, rows };
        assert!(matches!(
            fit_x_learner(&data, &base_cfg(), None, 1),
            Err(Error::Fit(_))
        ));
    }

    fn small_log(k_max: usize, seed: u64) -> Vec<ImpressionRecord> {
        let mut rng = seeding::rng(seed);
        let mut log = Vec::new();
        for q in 0..40 {
            for d in 0..k_max {
                let arm = rng.random_range(1..=k_max);
                // production position d+1; the swap moves 1 <-> arm
                let pos = if arm == 1 {
                    d + 1
                } else if d + 1 == 1 {
                    arm
                } else if d + 1 == arm {
                    1
                } else {
                    d + 1
                };
                let clicked = u8::from(rng.random::<f64>() < 0.5 / pos as f64);
                log.push(ImpressionRecord {
                    query_id: q.to_string(),
                    doc_index: d,
                    position: pos,
                    arm,
                    clicked,
                    context: vec![rng.random(), rng.random()],
                });
            }
        }
        log
    }

    #[test]
    fn bank_has_one_estimator_per_position() {
        let log = small_log(3, 41);
        let cfg = BankConfig {
            k_max: 3,
            forest: ForestConfig {
                n_trees: 10,
                ..ForestConfig::causal_default()
            },
            ..BankConfig::default()
        };
        let bank = fit_bank(&log, BankMethod::CausalForest, &cfg, 5).unwrap();
        let keys: Vec<usize> = bank.estimators.keys().copied().collect();
        assert_eq!(keys, vec![2, 3]);
        // determinism
        let again = fit_bank(&log, BankMethod::CausalForest, &cfg, 5).unwrap();
        assert_eq!(
            bank.predict(&[0.4, 0.4], 2).unwrap(),
            again.predict(&[0.4, 0.4], 2).unwrap()
        );
    }

    #[test]
    fn bank_prediction_routes_and_validates() {
        let log = small_log(3, 43);
        let cfg = BankConfig {
            k_max: 3,
            forest: ForestConfig {
                n_trees: 5,
                ..ForestConfig::causal_default()
            },
            ..BankConfig::default()
        };
        let bank = fit_bank(&log, BankMethod::XLearner, &cfg, 7).unwrap();
        assert_eq!(bank.predict(&[0.1, 0.2], 1).unwrap(), 0.0);
        let direct = match &bank.estimators[&2] {
            TauEstimator::XLearner(xl) => xl.predict(&[0.1, 0.2]),
            other => panic!("unexpected estimator {other:?}"),
        };
        assert_eq!(bank.predict(&[0.1, 0.2], 2).unwrap(), direct);
        assert!(bank.predict(&[0.1, 0.2], 4).is_err());
        assert!(bank.predict(&[0.1, 0.2], 0).is_err());
    }

    #[test]
    fn failed_positions_fall_back_to_difference_of_means() {
        // Position 3 never appears, so its dataset is degenerate; position 2
        // works. The bank must survive with a recorded failure.
        let mut log = Vec::new();
        for i in 0..20 {
            log.push(record("q", i, 1, 1, u8::from(i % 2 == 0)));
            log.push(record("r", i, 2, 2, 0));
        }
        let cfg = BankConfig {
            k_max: 3,
            forest: ForestConfig {
                n_trees: 5,
                ..ForestConfig::causal_default()
            },
            ..BankConfig::default()
        };
        let bank = fit_bank(&log, BankMethod::CausalForest, &cfg, 9).unwrap();
        assert_eq!(bank.failures.len(), 1);
        assert_eq!(bank.failures[0].0, 3);
        assert!(matches!(bank.estimators[&3], TauEstimator::Constant(c) if c == 0.0));

        // An injected fit failure (not a build failure) falls back to the
        // dataset's difference of means.
        let data = build_hte_dataset(&log, 2, 1).unwrap();
        let dom = difference_of_means(&data);
        assert!(dom.abs() > 0.0);
    }

    #[test]
    fn all_failures_is_a_bank_error() {
        // Only position-1 control impressions: every per-position dataset is
        // all-treated, so every fit degenerates.
        let log: Vec<ImpressionRecord> = (0..10).map(|i| record("q", i, 1, 1, 1)).collect();
        let cfg = BankConfig {
            k_max: 4,
            ..BankConfig::default()
        };
        assert!(matches!(
            fit_bank(&log, BankMethod::CausalForest, &cfg, 3),
            Err(Error::Fit(_))
        ));
    }
}
