//! Evaluation: the ground-truth effect oracle, estimation RMSE, nDCG@10,
//! and the Welch unequal-variance t-test.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::clicksim::{click_prob, examination_prob, ClickModelParams};
use crate::corpus::QueryGroup;
use crate::error::{Error, Result};
use crate::hte::TauSource;
use crate::ltr::LinearRankModel;

/// Closed-form treatment-effect oracle for the simulator's click model.
///
/// `tau*_k(x) = P(C | x, 1) - P(C | x, k) = (1 - e(x, k)) * (R + noise * (1 - R))`,
/// which is 0 at position 1 and nonnegative everywhere.
#[derive(Debug, Clone)]
pub struct TrueTauOracle {
    params: ClickModelParams,
    entries: HashMap<(String, usize), (Vec<f64>, u8)>,
}

impl TrueTauOracle {
    /// Build the lookup over the given groups (context = the selected
    /// feature slice of each document).
    pub fn new<'a>(
        groups: impl IntoIterator<Item = &'a QueryGroup>,
        context_indices: &[usize],
        params: ClickModelParams,
    ) -> Self {
        let mut entries = HashMap::new();
        for group in groups {
            for doc in &group.documents {
                entries.insert(
                    (group.query_id.clone(), doc.doc_index),
                    (doc.context(context_indices), doc.binary_rel),
                );
            }
        }
        TrueTauOracle { params, entries }
    }

    fn entry(&self, query_id: &str, doc_index: usize) -> Result<&(Vec<f64>, u8)> {
        self.entries
            .get(&(query_id.to_string(), doc_index))
            .ok_or_else(|| Error::Lookup(format!("unknown (query, document) ({query_id}, {doc_index})")))
    }

    /// `tau*_k` for a known (query, document).
    pub fn true_tau(&self, query_id: &str, doc_index: usize, k: usize) -> Result<f64> {
        let (x, rel) = self.entry(query_id, doc_index)?;
        Ok(self.tau_formula(x, *rel, k))
    }

    /// The simulator's closed-form click probability at position k.
    pub fn true_click_prob(&self, query_id: &str, doc_index: usize, k: usize) -> Result<f64> {
        let (x, rel) = self.entry(query_id, doc_index)?;
        Ok(click_prob(x, k, *rel, &self.params))
    }

    pub fn relevance(&self, query_id: &str, doc_index: usize) -> Result<u8> {
        Ok(self.entry(query_id, doc_index)?.1)
    }

    fn tau_formula(&self, x: &[f64], rel: u8, k: usize) -> f64 {
        if k == 1 {
            return 0.0;
        }
        let rel_factor = if rel == 1 { 1.0 } else { self.params.noise_click_prob };
        (1.0 - examination_prob(x, k, &self.params)) * rel_factor
    }

    pub fn params(&self) -> &ClickModelParams {
        &self.params
    }
}

impl TauSource for TrueTauOracle {
    /// Panics on an unknown (query, document); oracle injection is only
    /// meaningful over a corpus the oracle was built from.
    fn tau_at(&self, query_id: &str, doc_index: usize, _x: &[f64], k: usize) -> f64 {
        self.true_tau(query_id, doc_index, k)
            .expect("oracle queried outside its corpus")
    }
}

/// RMSE of an estimator against the oracle, plus per-relevance strata.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TauRmse {
    pub overall: f64,
    /// RMSE over documents with true relevance 0 (NaN when the stratum is
    /// empty).
    pub r0: f64,
    /// RMSE over documents with true relevance 1 (NaN when empty).
    pub r1: f64,
}

/// Estimation RMSE over every test (query, document) pair and every
/// position `k` in `{2..k_max}`:
/// `sqrt((1/N) sum_i sum_k (tau_hat_k(x_i) - tau*_k(x_i))^2)` where `N`
/// counts the (i, k) terms.
pub fn tau_rmse(
    estimator: &dyn TauSource,
    oracle: &TrueTauOracle,
    test: &[QueryGroup],
    context_indices: &[usize],
    k_max: usize,
) -> Result<TauRmse> {
    if test.is_empty() {
        return Err(Error::Validation("empty test set".into()));
    }
    let mut sums = [0.0f64; 3]; // overall, r0, r1
    let mut counts = [0usize; 3];
    for group in test {
        for doc in &group.documents {
            let x = doc.context(context_indices);
            let stratum = if doc.binary_rel == 1 { 2 } else { 1 };
            for k in 2..=k_max {
                let est = estimator.tau_at(&group.query_id, doc.doc_index, &x, k);
                let truth = oracle.true_tau(&group.query_id, doc.doc_index, k)?;
                let err = est - truth;
                sums[0] += err * err;
                counts[0] += 1;
                sums[stratum] += err * err;
                counts[stratum] += 1;
            }
        }
    }
    let rmse = |i: usize| {
        if counts[i] == 0 {
            f64::NAN
        } else {
            (sums[i] / counts[i] as f64).sqrt()
        }
    };
    Ok(TauRmse {
        overall: rmse(0),
        r0: rmse(1),
        r1: rmse(2),
    })
}

/// nDCG@10 with binary gains (`gain = rel`, discount `1/log2(rank + 1)`).
///
/// Queries without a relevant document are skipped; an error is returned if
/// none remain.
pub fn ndcg_at_10(model: &LinearRankModel, test: &[QueryGroup]) -> Result<f64> {
    ndcg_at_k(model, test, 10)
}

pub fn ndcg_at_k(model: &LinearRankModel, test: &[QueryGroup], k: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut retained = 0usize;
    for group in test {
        let n_rel = group.documents.iter().filter(|d| d.binary_rel == 1).count();
        if n_rel == 0 {
            continue;
        }
        let order = model.rank(group);
        let dcg: f64 = order
            .iter()
            .take(k)
            .enumerate()
            .map(|(j, &doc_index)| {
                let rel = f64::from(group.documents[doc_index].binary_rel);
                rel / ((j + 2) as f64).log2()
            })
            .sum();
        let ideal: f64 = (0..n_rel.min(k)).map(|j| 1.0 / ((j + 2) as f64).log2()).sum();
        total += dcg / ideal;
        retained += 1;
    }
    if retained == 0 {
        return Err(Error::Validation(
            "no test query has a relevant document".into(),
        ));
    }
    Ok(total / retained as f64)
}

/// Welch's unequal-variance t-test: returns `(t, df, p_two_sided)`.
///
/// Conventions for degenerate inputs: both samples constant with equal
/// means gives `p = 1`; both constant with unequal means gives `p = 0`.
pub fn welch_t_test(sample_a: &[f64], sample_b: &[f64]) -> Result<(f64, f64, f64)> {
    let (na, nb) = (sample_a.len(), sample_b.len());
    if na < 2 || nb < 2 {
        return Err(Error::Validation(
            "welch test needs at least two observations per sample".into(),
        ));
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let var = |s: &[f64], m: f64| s.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (s.len() - 1) as f64;
    let (ma, mb) = (mean(sample_a), mean(sample_b));
    let (va, vb) = (var(sample_a, ma), var(sample_b, mb));

    if va == 0.0 && vb == 0.0 {
        let df = (na + nb - 2) as f64;
        return if ma == mb {
            Ok((0.0, df, 1.0))
        } else {
            let t = if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY };
            Ok((t, df, 0.0))
        };
    }

    let sa = va / na as f64;
    let sb = vb / nb as f64;
    let se2 = sa + sb;
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1) as f64 + sb * sb / (nb - 1) as f64);
    let p = student_t_two_sided_p(t, df);
    Ok((t, df, p))
}

/// Two-sided tail probability of the t-distribution:
/// `p = I_{df/(df + t^2)}(df/2, 1/2)` via the regularized incomplete beta.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(df / 2.0, 0.5, x)
}

/// Regularized incomplete beta function `I_x(a, b)` by Lentz's continued
/// fraction; absolute accuracy around 1e-10 over the tested range.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "shape parameters must be positive");
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() + ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b);
    let front = ln_front.exp();
    // The continued fraction converges fastest for x < (a+1)/(a+b+2);
    // otherwise use the symmetry I_x(a,b) = 1 - I_{1-x}(b,a).
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - regularized_incomplete_beta(b, a, 1.0 - x)
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        // even step
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // odd step
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation (g = 7, n = 9), accurate to ~1e-13 for positive
/// arguments.
fn ln_gamma(z: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507343278686905,
        -0.13857109526572012,
        9.984_369_578_019_572e-6,
        1.5056327351493116e-7,
    ];
    debug_assert!(z > 0.0);
    let z = z - 1.0;
    let mut x = 0.999_999_999_999_809_93;
    for (i, &c) in COEFFS.iter().enumerate() {
        x += c / (z + (i + 1) as f64);
    }
    let t = z + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + x.ln()
}

/// One row of the experiment results table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub avg_searches: f64,
    pub pct_queries: f64,
    pub run: usize,
    pub rmse: f64,
    pub rmse_r0: f64,
    pub rmse_r1: f64,
    pub ndcg10: f64,
    pub wallclock_s: f64,
}
