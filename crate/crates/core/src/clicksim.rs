//! Search-traffic simulation: query sampling, production ranking, randomized
//! swap interventions, and noisy position-biased clicks.
//!
//! Arm 1 shows the production ranking unchanged; arm k swaps the documents
//! at positions 1 and k before display (a no-op when the list is shorter
//! than k). Clicks follow the examination/relevance factorization
//! `P(C=1) = P(E=1 | x, k) * (R + noise * (1 - R))` with
//! `P(E=1 | x, k) = 1 / k^max(w.x + 1, 0)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::QueryGroup;
use crate::error::{Error, Result};
use crate::ltr::LinearRankModel;
use crate::seeding::{self, mix_index, mix_tag};

/// Click-model parameters: one global context weight vector, the list
/// truncation length (also the number of arms), and the misclick rate on
/// examined irrelevant documents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClickModelParams {
    pub w: Vec<f64>,
    pub k_max: usize,
    pub noise_click_prob: f64,
}

impl ClickModelParams {
    /// Draw `w` uniformly from `[-1, 1)` with the defaults `k_max = 10`,
    /// `noise_click_prob = 0.1`.
    pub fn draw(t: usize, seed: u64) -> Self {
        let mut rng = seeding::rng(mix_tag(seed, "click-w"));
        ClickModelParams {
            w: (0..t).map(|_| rng.random_range(-1.0..1.0)).collect(),
            k_max: 10,
            noise_click_prob: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_max < 2 {
            return Err(Error::Validation("k_max must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_click_prob) {
            return Err(Error::Validation("noise_click_prob must lie in [0, 1]".into()));
        }
        if self.w.iter().any(|v| !(-1.0..1.0).contains(v)) {
            return Err(Error::Validation("w components must lie in [-1, 1)".into()));
        }
        Ok(())
    }
}

/// One displayed (query, document, position) event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionRecord {
    pub query_id: String,
    pub doc_index: usize,
    /// Displayed position, 1-based.
    pub position: usize,
    /// Intervention arm in {1..k_max}; arm 1 is the control group.
    pub arm: usize,
    pub clicked: u8,
    /// Selected context features of the document.
    pub context: Vec<f64>,
}

/// Uniform-with-replacement draw of `round(avg * |groups|)` query-group
/// indices.
pub fn sample_searches(groups: &[QueryGroup], avg_searches_per_query: f64, seed: u64) -> Result<Vec<usize>> {
    if groups.is_empty() {
        return Err(Error::Validation("cannot sample from an empty corpus".into()));
    }
    if avg_searches_per_query <= 0.0 {
        return Err(Error::Validation("avg_searches_per_query must be positive".into()));
    }
    let count = (avg_searches_per_query * groups.len() as f64).round() as usize;
    let mut rng = seeding::rng(seed);
    Ok((0..count).map(|_| rng.random_range(0..groups.len())).collect())
}

/// Rank a group with the production model and truncate to the top `k_max`.
pub fn rank_and_truncate(group: &QueryGroup, ranker: &LinearRankModel, k_max: usize) -> Vec<usize> {
    let mut order = ranker.rank(group);
    order.truncate(k_max);
    order
}

/// Uniform arm in {1..k_max}, deterministic given `(seed, counter)`.
pub fn assign_arm(query_instance_counter: u64, k_max: usize, seed: u64) -> usize {
    let mut rng = seeding::rng(mix_index(seed, query_instance_counter));
    rng.random_range(1..=k_max)
}

/// `P(E=1 | x, k) = 1 / k^max(w.x + 1, 0)`; always in `(0, 1]`, and exactly
/// 1 at position 1.
pub fn examination_prob(x: &[f64], k: usize, params: &ClickModelParams) -> f64 {
    debug_assert!(k >= 1);
    let wx: f64 = params.w.iter().zip(x).map(|(a, b)| a * b).sum();
    let exponent = (wx + 1.0).max(0.0);
    (k as f64).powf(-exponent)
}

/// Closed-form click probability of the simulator (examination times
/// relevance, with misclick noise on irrelevant documents).
pub fn click_prob(x: &[f64], k: usize, binary_rel: u8, params: &ClickModelParams) -> f64 {
    let rel_factor = if binary_rel == 1 { 1.0 } else { params.noise_click_prob };
    examination_prob(x, k, params) * rel_factor
}

/// Draw one click: examine with `examination_prob`, then click examined
/// relevant documents always and examined irrelevant ones with the noise
/// probability.
pub fn generate_click(
    x: &[f64],
    k: usize,
    binary_rel: u8,
    params: &ClickModelParams,
    rng: &mut ChaCha8Rng,
) -> u8 {
    let examined = rng.random::<f64>() < examination_prob(x, k, params);
    if !examined {
        return 0;
    }
    if binary_rel == 1 {
        return 1;
    }
    u8::from(rng.random::<f64>() < params.noise_click_prob)
}

/// Run the full intervention simulation over `groups`.
///
/// Every sampled query is ranked, truncated, assigned an arm, swapped
/// accordingly, and emits one impression per displayed position. Output is
/// a pure function of `(groups, ranker, params, context_indices,
/// avg_searches, seed)`.
pub fn run_simulation(
    groups: &[QueryGroup],
    ranker: &LinearRankModel,
    params: &ClickModelParams,
    context_indices: &[usize],
    avg_searches_per_query: f64,
    seed: u64,
) -> Result<Vec<ImpressionRecord>> {
    params.validate()?;
    if params.w.len() != context_indices.len() {
        return Err(Error::Validation(format!(
            "click-model w has length {} but {} context features are selected",
            params.w.len(),
            context_indices.len()
        )));
    }
    let searches = sample_searches(groups, avg_searches_per_query, mix_tag(seed, "searches"))?;
    let arm_seed = mix_tag(seed, "arms");
    let click_seed = mix_tag(seed, "clicks");

    let mut log = Vec::new();
    for (instance, &gidx) in searches.iter().enumerate() {
        let group = &groups[gidx];
        let mut displayed = rank_and_truncate(group, ranker, params.k_max);
        let arm = assign_arm(instance as u64, params.k_max, arm_seed);
        if arm > 1 && arm <= displayed.len() {
            displayed.swap(0, arm - 1);
        }
        let mut rng = seeding::rng(mix_index(click_seed, instance as u64));
        for (pos0, &doc_index) in displayed.iter().enumerate() {
            let doc = &group.documents[doc_index];
            debug_assert_eq!(doc.doc_index, doc_index);
            let context = doc.context(context_indices);
            let clicked = generate_click(&context, pos0 + 1, doc.binary_rel, params, &mut rng);
            log.push(ImpressionRecord {
                query_id: group.query_id.clone(),
                doc_index,
                position: pos0 + 1,
                arm,
                clicked,
                context,
            });
        }
    }
    Ok(log)
}

/// Write the impression log as CSV (`query_id,doc_index,position,arm,clicked`).
pub fn write_impressions<W: std::io::Write>(log: &[ImpressionRecord], mut w: W) -> Result<()> {
    writeln!(w, "query_id,doc_index,position,arm,clicked")?;
    for r in log {
        writeln!(w, "{},{},{},{},{}", r.query_id, r.doc_index, r.position, r.arm, r.clicked)?;
    }
    Ok(())
}

/// Write the context sidecar: one row per unique (query, document) in
/// first-appearance order (`query_id,doc_index,x0,...`).
pub fn write_contexts<W: std::io::Write>(log: &[ImpressionRecord], mut w: W) -> Result<()> {
    let t = log.first().map_or(0, |r| r.context.len());
    write!(w, "query_id,doc_index")?;
    for j in 0..t {
        write!(w, ",x{j}")?;
    }
    writeln!(w)?;
    let mut seen = std::collections::HashSet::new();
    for r in log {
        if seen.insert((r.query_id.clone(), r.doc_index)) {
            write!(w, "{},{}", r.query_id, r.doc_index)?;
            for v in &r.context {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Read an impression CSV and its context sidecar back into records.
pub fn read_impressions<R: std::io::BufRead>(impressions: R, contexts: R) -> Result<Vec<ImpressionRecord>> {
    let mut ctx: std::collections::HashMap<(String, usize), Vec<f64>> = std::collections::HashMap::new();
    let mut lines = contexts.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty context file".into()))??;
    if !header.starts_with("query_id,doc_index") {
        return Err(Error::Format("bad context header".into()));
    }
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let qid = fields
            .next()
            .ok_or_else(|| Error::Parse { line: lineno + 2, msg: "missing query_id".into() })?;
        let doc: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Parse { line: lineno + 2, msg: "bad doc_index".into() })?;
        let vals: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line: lineno + 2,
                    msg: format!("bad context value `{f}`"),
                })
            })
            .collect::<Result<_>>()?;
        ctx.insert((qid.to_string(), doc), vals);
    }

    let mut out = Vec::new();
    let mut lines = impressions.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty impression file".into()))??;
    if header != "query_id,doc_index,position,arm,clicked" {
        return Err(Error::Format("bad impression header".into()));
    }
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: lineno + 2,
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let parse_usize = |s: &str, what: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse {
                line: lineno + 2,
                msg: format!("bad {what} `{s}`"),
            })
        };
        let query_id = fields[0].to_string();
        let doc_index = parse_usize(fields[1], "doc_index")?;
        let context = ctx
            .get(&(query_id.clone(), doc_index))
            .ok_or_else(|| Error::Lookup(format!("no context for ({query_id}, {doc_index})")))?
            .clone();
        out.push(ImpressionRecord {
            query_id,
            doc_index,
            position: parse_usize(fields[2], "position")?,
            arm: parse_usize(fields[3], "arm")?,
            clicked: parse_usize(fields[4], "clicked")? as u8,
            context,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, Document};

    fn model(weights: Vec<f64>) -> LinearRankModel {
        LinearRankModel {
            weights,
            l2: 0.0,
            lr: 0.0,
            epochs: 0,
            seed: 0,
        }
    }

    fn group_with_scores(scores: &[f64]) -> QueryGroup {
        QueryGroup {
            query_id: "q".into(),
            documents: scores
                .iter()
                .enumerate()
                .map(|(i, &s)| Document::new(i, vec![s], 0).unwrap())
                .collect(),
        }
    }

    fn params(t: usize) -> ClickModelParams {
        ClickModelParams {
            w: vec![0.0; t],
            k_max: 10,
            noise_click_prob: 0.1,
        }
    }

    #[test]
    fn search_counts_and_determinism() {
        let split = generate_synthetic_corpus(100, 2, 2, 1).unwrap();
        let groups = split.train_and_validation();
        let draws = sample_searches(&groups, 5.0, 7).unwrap();
        assert_eq!(draws.len(), 5 * groups.len());
        assert_eq!(draws, sample_searches(&groups, 5.0, 7).unwrap());
        assert!(sample_searches(&[], 5.0, 7).is_err());
    }

    #[test]
    fn per_query_draw_distribution_is_uniform() {
        let split = generate_synthetic_corpus(100, 2, 2, 1).unwrap();
        let groups: Vec<QueryGroup> = split.all_groups().cloned().collect();
        let draws = sample_searches(&groups, 100.0, 3).unwrap();
        let mut counts = vec![0f64; groups.len()];
        for d in draws {
            counts[d] += 1.0;
        }
        let expected = 100.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected) * (c - expected) / expected).sum();
        // 99 degrees of freedom: the statistic should land in a generous band
        assert!((50.0..170.0).contains(&chi2), "chi2 {chi2}");
    }

    #[test]
    fn ranking_sorts_and_truncates() {
        let g = group_with_scores(&[0.1, 0.9, 0.5]);
        assert_eq!(rank_and_truncate(&g, &model(vec![1.0]), 10), vec![1, 2, 0]);

        let many = group_with_scores(&(0..15).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(rank_and_truncate(&many, &model(vec![1.0]), 10).len(), 10);

        let tied = group_with_scores(&[0.5, 0.5, 0.5]);
        assert_eq!(rank_and_truncate(&tied, &model(vec![1.0]), 10), vec![0, 1, 2]);
    }

    #[test]
    fn arm_assignment_is_uniform_and_stable() {
        let mut counts = vec![0usize; 11];
        for i in 0..10_000u64 {
            counts[assign_arm(i, 10, 5)] += 1;
        }
        assert_eq!(counts[0], 0);
        for arm in 1..=10 {
            let freq = counts[arm] as f64 / 10_000.0;
            assert!((0.08..=0.12).contains(&freq), "arm {arm} freq {freq}");
        }
        for i in 0..200u64 {
            assert!((1..=2).contains(&assign_arm(i, 2, 5)));
        }
        assert_eq!(assign_arm(7, 10, 5), assign_arm(7, 10, 5));
    }

    #[test]
    fn examination_closed_forms() {
        let p = params(2);
        assert_eq!(examination_prob(&[0.3, 0.4], 1, &p), 1.0);
        // w.x = 0 makes the exponent exactly 1
        assert_eq!(examination_prob(&[0.3, 0.4], 2, &p), 0.5);
        // strongly negative w.x clamps the exponent at 0
        let neg = ClickModelParams {
            w: vec![-0.999, -0.999],
            ..params(2)
        };
        assert_eq!(examination_prob(&[1.0, 0.8], 9, &neg), 1.0);
    }

    #[test]
    fn click_generation_matches_closed_form() {
        let p = params(1);
        let mut rng = seeding::rng(2);
        // position 1, relevant: every draw clicks
        for _ in 0..500 {
            assert_eq!(generate_click(&[0.5], 1, 1, &p, &mut rng), 1);
        }
        // position 2, irrelevant, exponent 1: closed form 0.5 * 0.1 = 0.05
        let n = 200_000;
        let clicks: u32 = (0..n)
            .map(|_| u32::from(generate_click(&[0.5], 2, 0, &p, &mut rng)))
            .sum();
        let rate = f64::from(clicks) / f64::from(n);
        assert!((rate - 0.05).abs() < 0.005, "rate {rate}");
        assert!((click_prob(&[0.5], 2, 0, &p) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn single_candidate_queries_degenerate_cleanly() {
        let split = generate_synthetic_corpus(5, 1, 2, 1).unwrap();
        let groups = split.train_and_validation();
        let p = params(2);
        let log = run_simulation(&groups, &model(vec![1.0, 0.0]), &p, &[0, 1], 3.0, 9).unwrap();
        assert_eq!(log.len(), 3 * groups.len());
        assert!(log.iter().all(|r| r.position == 1));
    }

    #[test]
    fn swap_semantics_move_the_kth_document_to_the_top() {
        let split = generate_synthetic_corpus(20, 10, 3, 2).unwrap();
        let groups = split.train_and_validation();
        let ranker = model(vec![1.0, 0.5, -0.2]);
        let p = params(3);
        let log = run_simulation(&groups, &ranker, &p, &[0, 1, 2], 4.0, 11).unwrap();

        // Reconstruct each instance's production ranking and audit the swap.
        let mut by_instance: Vec<Vec<&ImpressionRecord>> = Vec::new();
        for r in &log {
            if r.position == 1 {
                by_instance.push(vec![r]);
            } else {
                by_instance.last_mut().unwrap().push(r);
            }
        }
        let mut checked_swapped = 0;
        for records in &by_instance {
            let arm = records[0].arm;
            let group = groups.iter().find(|g| g.query_id == records[0].query_id).unwrap();
            let production = rank_and_truncate(group, &ranker, p.k_max);
            if arm > 1 && arm <= production.len() {
                assert_eq!(records[0].doc_index, production[arm - 1]);
                assert_eq!(records[arm - 1].doc_index, production[0]);
                checked_swapped += 1;
            } else {
                assert_eq!(records[0].doc_index, production[0]);
            }
            // swap involution: records at other positions are unchanged
            for (pos0, rec) in records.iter().enumerate() {
                if pos0 != 0 && pos0 != arm - 1 {
                    assert_eq!(rec.doc_index, production[pos0]);
                }
            }
        }
        assert!(checked_swapped > 10, "swaps exercised: {checked_swapped}");

        let expected: usize = sample_searches(&groups, 4.0, mix_tag(11, "searches"))
            .unwrap()
            .iter()
            .map(|&g| groups[g].documents.len().min(p.k_max))
            .sum();
        assert_eq!(log.len(), expected);
    }

    #[test]
    fn simulation_is_reproducible() {
        let split = generate_synthetic_corpus(15, 6, 2, 3).unwrap();
        let groups = split.train_and_validation();
        let ranker = model(vec![0.4, 0.6]);
        let p = params(2);
        let a = run_simulation(&groups, &ranker, &p, &[0, 1], 2.0, 21).unwrap();
        let b = run_simulation(&groups, &ranker, &p, &[0, 1], 2.0, 21).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn position_one_dominates_every_position() {
        let mut rng = seeding::rng(6);
        use rand::Rng;
        for _ in 0..200 {
            let w: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = ClickModelParams {
                w,
                k_max: 10,
                noise_click_prob: 0.1,
            };
            let x: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let r = u8::from(rng.random::<f64>() < 0.5);
            let top = click_prob(&x, 1, r, &p);
            for k in 2..=10 {
                assert!(top >= click_prob(&x, k, r, &p) - 1e-15);
            }
        }
    }

    #[test]
    fn impression_csv_round_trips() {
        let split = generate_synthetic_corpus(8, 4, 2, 3).unwrap();
        let groups = split.train_and_validation();
        let p = params(2);
        let log = run_simulation(&groups, &model(vec![1.0, 1.0]), &p, &[0, 1], 2.0, 13).unwrap();
        let mut imp = Vec::new();
        let mut ctx = Vec::new();
        write_impressions(&log, &mut imp).unwrap();
        write_contexts(&log, &mut ctx).unwrap();
        let back = read_impressions(
            std::io::Cursor::new(imp.as_slice()),
            std::io::Cursor::new(ctx.as_slice()),
        )
        .unwrap();
        assert_eq!(log, back);
    }
}
