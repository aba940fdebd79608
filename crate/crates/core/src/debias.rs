//! Turning effect estimates into training data.
//!
//! Two routes out of a control-arm click log:
//!
//! * correction + resampling — lift each (query, document)'s observed click
//!   rate to a potential position-1 rate `theta = clamp(ctr_obs + tau_hat,
//!   0, 1)` and re-draw its `n_obs` clicks from `Binomial(n_obs, theta)`;
//! * inverse propensity weighting — weight each observed click by the
//!   reciprocal of its (optionally clipped) examination propensity,
//!   leaving unclicked documents as unweighted negatives.

use std::collections::HashMap;
use std::io::Write;

use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::clicksim::ImpressionRecord;
use crate::corpus::QueryGroup;
use crate::cpbm::CpbmNetworks;
use crate::error::{Error, Result};
use crate::hte::TauSource;
use crate::ltr::{TrainingDoc, TrainingList};
use crate::seeding::{mix_index, mix_tag, rng};

/// One corrected (query, document) group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectedExample {
    pub query_id: String,
    pub doc_index: usize,
    pub x: Vec<f64>,
    /// Observed (displayed) position of the group.
    pub position: usize,
    pub n_obs: usize,
    pub ctr_obs: f64,
    pub tau_hat: f64,
    /// `clamp(ctr_obs + tau_hat, 0, 1)`.
    pub theta: f64,
    pub resampled_clicks: usize,
}

/// One IPS-weighted click. Unclicked impressions never receive an entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IpsWeightedClick {
    pub query_id: String,
    pub doc_index: usize,
    pub position: usize,
    pub propensity: f64,
    pub weight: f64,
}

/// Correct observed click rates to position-1 potential rates and resample.
///
/// Only control-arm (arm 1) impressions are used; there each (query,
/// document) sits at its production position, so grouping by (query,
/// document, position) yields exactly one group per pair. `resampled_clicks
/// ~ Binomial(n_obs, theta)`, seeded per group.
pub fn correct_and_resample(
    log: &[ImpressionRecord],
    tau: &dyn TauSource,
    seed: u64,
) -> Vec<CorrectedExample> {
    struct Obs {
        x: Vec<f64>,
        n: usize,
        clicks: usize,
    }
    let mut order: Vec<(String, usize, usize)> = Vec::new();
    let mut groups: HashMap<(String, usize, usize), Obs> = HashMap::new();
    for rec in log.iter().filter(|r| r.arm == 1) {
        let key = (rec.query_id.clone(), rec.doc_index, rec.position);
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Obs {
                x: rec.context.clone(),
                n: 0,
                clicks: 0,
            }
        });
        entry.n += 1;
        entry.clicks += usize::from(rec.clicked == 1);
    }

    let mut out = Vec::with_capacity(order.len());
    for (query_id, doc_index, position) in order {
        let obs = &groups[&(query_id.clone(), doc_index, position)];
        let ctr_obs = obs.clicks as f64 / obs.n as f64;
        let tau_hat = tau.tau_at(&query_id, doc_index, &obs.x, position);
        let theta = (ctr_obs + tau_hat).clamp(0.0, 1.0);
        let group_seed = mix_index(mix_tag(seed, &query_id), (doc_index as u64) << 8 | position as u64);
        let resampled_clicks = binomial_draw(obs.n, theta, group_seed);
        out.push(CorrectedExample {
            query_id,
            doc_index,
            x: obs.x.clone(),
            position,
            n_obs: obs.n,
            ctr_obs,
            tau_hat,
            theta,
            resampled_clicks,
        });
    }
    out
}

fn binomial_draw(n: usize, theta: f64, seed: u64) -> usize {
    if theta <= 0.0 {
        return 0;
    }
    if theta >= 1.0 {
        return n;
    }
    let mut r = rng(seed);
    let dist = Binomial::new(n as u64, theta).expect("theta validated above");
    dist.sample(&mut r) as usize
}

/// Clip a propensity into `[lo, hi)` and return `(effective propensity,
/// weight)`. The half-open upper bound is realized as `hi - 1e-9`.
pub fn clipped_weight(propensity: f64, clip: Option<(f64, f64)>) -> (f64, f64) {
    let p = match clip {
        Some((lo, hi)) => propensity.clamp(lo, hi - 1e-9),
        None => propensity,
    };
    (p, 1.0 / p)
}

/// Inverse-propensity weights for every clicked control-arm impression.
pub fn ips_weights(
    log: &[ImpressionRecord],
    nets: &CpbmNetworks,
    clip: Option<(f64, f64)>,
) -> Result<Vec<IpsWeightedClick>> {
    if let Some((lo, hi)) = clip {
        if !(lo > 0.0 && lo < hi && hi <= 1.0) {
            return Err(Error::Validation(format!(
                "clip range [{lo}, {hi}) must satisfy 0 < lo < hi <= 1"
            )));
        }
    }
    let mut out = Vec::new();
    for rec in log.iter().filter(|r| r.arm == 1 && r.clicked == 1) {
        let raw = nets.predict_propensity(&rec.context, rec.position)?;
        if raw <= 0.0 {
            return Err(Error::Validation(format!(
                "nonpositive propensity {raw} at position {}",
                rec.position
            )));
        }
        let (propensity, weight) = clipped_weight(raw, clip);
        out.push(IpsWeightedClick {
            query_id: rec.query_id.clone(),
            doc_index: rec.doc_index,
            position: rec.position,
            propensity,
            weight,
        });
    }
    Ok(out)
}

/// The two ways to assemble ranker training lists.
pub enum TrainingSource<'a> {
    /// Corrected + resampled examples: each document carries its resampled
    /// click count as click mass and the remaining `n_obs -
    /// resampled_clicks` draws as non-click mass, so partially-clicked
    /// documents act on both sides of the pairwise loss.
    Resampled(&'a [CorrectedExample]),
    /// IPS-weighted clicks over the displayed control-arm lists: clicked
    /// documents become positives with their summed IPS weight, unclicked
    /// ones unweighted negatives.
    Ips {
        weights: &'a [IpsWeightedClick],
        log: &'a [ImpressionRecord],
    },
}

/// Assemble per-query training lists with full corpus features looked up
/// from `groups` (keyed by query id).
pub fn make_training_lists(
    source: TrainingSource,
    groups: &HashMap<&str, &QueryGroup>,
) -> Vec<TrainingList> {
    // (query, doc) -> (click mass, non-click mass), plus per-query order
    let mut query_order: Vec<String> = Vec::new();
    let mut docs_by_query: HashMap<String, Vec<(usize, f64, f64)>> = HashMap::new();
    let mut push = |qid: &str, doc: usize, pos: f64, neg: f64| {
        if !docs_by_query.contains_key(qid) {
            query_order.push(qid.to_string());
            docs_by_query.insert(qid.to_string(), Vec::new());
        }
        docs_by_query.get_mut(qid).unwrap().push((doc, pos, neg));
    };

    match source {
        TrainingSource::Resampled(examples) => {
            for ex in examples {
                push(
                    &ex.query_id,
                    ex.doc_index,
                    ex.resampled_clicks as f64,
                    (ex.n_obs - ex.resampled_clicks) as f64,
                );
            }
        }
        TrainingSource::Ips { weights, log } => {
            let mut weight_of: HashMap<(&str, usize), f64> = HashMap::new();
            for w in weights {
                *weight_of.entry((w.query_id.as_str(), w.doc_index)).or_insert(0.0) += w.weight;
            }
            let mut seen: std::collections::HashSet<(String, usize)> = std::collections::HashSet::new();
            for rec in log.iter().filter(|r| r.arm == 1) {
                if !seen.insert((rec.query_id.clone(), rec.doc_index)) {
                    continue;
                }
                match weight_of.get(&(rec.query_id.as_str(), rec.doc_index)) {
                    Some(&w) => push(&rec.query_id, rec.doc_index, w, 0.0),
                    None => push(&rec.query_id, rec.doc_index, 0.0, 1.0),
                }
            }
        }
    }

    let mut lists = Vec::with_capacity(query_order.len());
    for qid in query_order {
        let Some(group) = groups.get(qid.as_str()) else {
            log::warn!("query {qid} has no corpus group; skipping its training list");
            continue;
        };
        let mut entries = docs_by_query.remove(&qid).unwrap();
        entries.sort_by_key(|&(doc, _, _)| doc);
        let docs: Vec<TrainingDoc> = entries
            .into_iter()
            .filter_map(|(doc_index, pos_weight, neg_weight)| {
                let doc = group.documents.get(doc_index)?;
                debug_assert_eq!(doc.doc_index, doc_index);
                Some(TrainingDoc {
                    doc_index,
                    features: doc.features.clone(),
                    pos_weight,
                    neg_weight,
                })
            })
            .collect();
        if !docs.is_empty() {
            lists.push(TrainingList {
                query_id: qid,
                docs,
            });
        }
    }
    lists
}

/// Dump corrected examples as CSV
/// (`query_id,doc_index,n_obs,ctr_obs,tau_hat,theta,resampled_clicks`).
pub fn write_corrected_csv<W: Write>(examples: &[CorrectedExample], mut w: W) -> Result<()> {
    writeln!(w, "query_id,doc_index,n_obs,ctr_obs,tau_hat,theta,resampled_clicks")?;
    for ex in examples {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            ex.query_id, ex.doc_index, ex.n_obs, ex.ctr_obs, ex.tau_hat, ex.theta, ex.resampled_clicks
        )?;
    }
    Ok(())
}
