//! Ranking corpus handling: LETOR parsing, normalization, splits,
//! subsampling, context-feature selection, and synthetic corpora for
//! desk-scale runs.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{ForestConfig, RegressionForest};
use crate::seeding::{self, mix_tag};

/// Grades 3 and 4 count as relevant, everything below as irrelevant.
pub fn binarize_grade(grade: u8) -> u8 {
    u8::from(grade >= 3)
}

/// One candidate document of a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    /// Position within its query group's file order.
    pub doc_index: usize,
    pub features: Vec<f64>,
    /// Graded relevance in {0..4}.
    pub grade: u8,
    /// 1 iff grade is 3 or 4.
    pub binary_rel: u8,
}

impl Document {
    pub fn new(doc_index: usize, features: Vec<f64>, grade: u8) -> Result<Self> {
        if grade > 4 {
            return Err(Error::Validation(format!(
                "grade {grade} outside {{0..4}}"
            )));
        }
        Ok(Document {
            doc_index,
            features,
            grade,
            binary_rel: binarize_grade(grade),
        })
    }

    /// The selected context-feature slice of this document.
    pub fn context(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().map(|&i| self.features[i]).collect()
    }
}

/// A query and its candidate documents — the unit of ranking and sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryGroup {
    pub query_id: String,
    pub documents: Vec<Document>,
}

/// Train/validation/test splits plus feature metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<QueryGroup>,
    pub validation: Vec<QueryGroup>,
    pub test: Vec<QueryGroup>,
    pub feature_dim: usize,
    /// Indices of the selected context features (ascending, no duplicates).
    pub context_feature_indices: Vec<usize>,
}

impl CorpusSplit {
    /// All groups across the three splits, in split order.
    pub fn all_groups(&self) -> impl Iterator<Item = &QueryGroup> {
        self.train
            .iter()
            .chain(self.validation.iter())
            .chain(self.test.iter())
    }

    /// Train plus validation groups (the pool the simulator draws from).
    pub fn train_and_validation(&self) -> Vec<QueryGroup> {
        let mut out = self.train.clone();
        out.extend(self.validation.iter().cloned());
        out
    }
}

/// Parse the LETOR/SVMLight-rank text format.
///
/// Each line reads `<grade> qid:<id> <fidx>:<val> ... [# comment]` with
/// 1-based, strictly increasing feature indices. Documents are grouped by
/// qid in first-appearance order; indices absent from a line become `0.0`,
/// and every feature vector is padded to the maximum index seen in the
/// stream.
pub fn parse_letor<R: BufRead>(reader: R) -> Result<Vec<QueryGroup>> {
    struct RawDoc {
        group: usize,
        grade: u8,
        features: Vec<(usize, f64)>,
    }

    let mut group_of: HashMap<String, usize> = HashMap::new();
    let mut group_ids: Vec<String> = Vec::new();
    let mut raw_docs: Vec<RawDoc> = Vec::new();
    let mut feature_dim = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let content = match line.find('#') {
            Some(pos) => &line[..pos],
            None => &line[..],
        };
        let mut tokens = content.split_whitespace();
        let Some(grade_tok) = tokens.next() else {
            continue; // blank or comment-only line
        };
        let grade: u8 = grade_tok.parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("invalid grade `{grade_tok}`"),
        })?;
        if grade > 4 {
            return Err(Error::Validation(format!(
                "line {lineno}: grade {grade} outside {{0..4}}"
            )));
        }
        let qid = tokens
            .next()
            .and_then(|t| t.strip_prefix("qid:"))
            .filter(|id| !id.is_empty())
            .ok_or_else(|| Error::Parse {
                line: lineno,
                msg: "missing qid:<id> token".into(),
            })?;

        let mut features = Vec::new();
        let mut last_idx = 0usize;
        for tok in tokens {
            let (idx_str, val_str) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("expected <index>:<value>, got `{tok}`"),
            })?;
            let idx: usize = idx_str.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("invalid feature index `{idx_str}`"),
            })?;
            let val: f64 = val_str.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("invalid feature value `{val_str}`"),
            })?;
            if idx == 0 || idx <= last_idx {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("feature indices must be 1-based and strictly increasing (saw {idx} after {last_idx})"),
                });
            }
            last_idx = idx;
            features.push((idx, val));
        }
        feature_dim = feature_dim.max(last_idx);

        let next_id = group_ids.len();
        let group = *group_of.entry(qid.to_string()).or_insert_with(|| {
            group_ids.push(qid.to_string());
            next_id
        });
        raw_docs.push(RawDoc {
            group,
            grade,
            features,
        });
    }

    let mut groups: Vec<QueryGroup> = group_ids
        .into_iter()
        .map(|query_id| QueryGroup {
            query_id,
            documents: Vec::new(),
        })
        .collect();
    for raw in raw_docs {
        let docs = &mut groups[raw.group].documents;
        let mut dense = vec![0.0; feature_dim];
        for (idx, val) in raw.features {
            dense[idx - 1] = val;
        }
        let doc = Document::new(docs.len(), dense, raw.grade)?;
        docs.push(doc);
    }
    Ok(groups)
}

/// Serialize groups back to LETOR lines (dense indices, shortest round-trip
/// float formatting, so a parse of the output reproduces the input exactly).
pub fn write_letor<W: Write>(groups: &[QueryGroup], mut w: W) -> Result<()> {
    for group in groups {
        for doc in &group.documents {
            write!(w, "{} qid:{}", doc.grade, group.query_id)?;
            for (i, v) in doc.features.iter().enumerate() {
                write!(w, " {}:{}", i + 1, v)?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Pad every document's feature vector with zeros up to `dim`.
pub fn pad_features(groups: &mut [QueryGroup], dim: usize) {
    for group in groups {
        for doc in &mut group.documents {
            if doc.features.len() < dim {
                doc.features.resize(dim, 0.0);
            }
        }
    }
}

/// Per-feature min-max normalization.
///
/// The ranges come from the train split only; validation and test values
/// are clamped into `[0, 1]`, and features constant on train map to `0.0`
/// everywhere.
pub fn normalize_features(mut splits: CorpusSplit) -> CorpusSplit {
    let d = splits.feature_dim;
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for group in &splits.train {
        for doc in &group.documents {
            for (j, v) in doc.features.iter().enumerate() {
                min[j] = min[j].min(*v);
                max[j] = max[j].max(*v);
            }
        }
    }
    let apply = |groups: &mut Vec<QueryGroup>| {
        for group in groups.iter_mut() {
            for doc in &mut group.documents {
                for (j, v) in doc.features.iter_mut().enumerate() {
                    *v = if max[j] > min[j] {
                        ((*v - min[j]) / (max[j] - min[j])).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                }
            }
        }
    };
    apply(&mut splits.train);
    apply(&mut splits.validation);
    apply(&mut splits.test);
    splits
}

/// Importance-selection forest settings (fixed on purpose: 100 trees,
/// depth 8, row subsample 0.8).
fn importance_forest_config(seed: u64) -> ForestConfig {
    ForestConfig {
        n_trees: 100,
        max_depth: 8,
        min_leaf: 5,
        min_leaf_per_arm: 1,
        subsample_fraction: 0.8,
        n_candidate_features: 0,
        honest: false,
        seed,
    }
}

/// Select the `n` most important feature indices for predicting binary
/// relevance over the train and validation documents.
///
/// Importance comes from a random forest fit on (features -> binary_rel);
/// on 0/1 targets the variance split criterion is proportional to Gini, so
/// the regression forest doubles as the classifier here. Ties rank the
/// lower index first; the result is sorted ascending.
pub fn select_context_features(
    train: &[QueryGroup],
    validation: &[QueryGroup],
    n: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut x: Vec<Vec<f64>> = Vec::new();
    let mut y: Vec<f64> = Vec::new();
    for group in train.iter().chain(validation.iter()) {
        for doc in &group.documents {
            x.push(doc.features.clone());
            y.push(f64::from(doc.binary_rel));
        }
    }
    let Some(first) = x.first() else {
        return Err(Error::Validation("no documents to select features from".into()));
    };
    let d = first.len();
    if n == 0 {
        return Err(Error::Validation("must select at least one feature".into()));
    }
    if n > d {
        return Err(Error::Validation(format!(
            "cannot select {n} features out of {d}"
        )));
    }

    let forest = RegressionForest::fit(&x, &y, &importance_forest_config(seed))?;
    let importance = forest.feature_importance();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    let mut selected: Vec<usize> = order.into_iter().take(n).collect();
    selected.sort_unstable();
    Ok(selected)
}

/// Uniform sample of `round(fraction * len)` query groups (at least one),
/// without replacement, in stable corpus order.
pub fn subsample_queries(
    groups: &[QueryGroup],
    fraction: f64,
    seed: u64,
) -> Result<Vec<QueryGroup>> {
    if groups.is_empty() {
        return Err(Error::Validation("cannot subsample an empty corpus".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let count = ((fraction * groups.len() as f64).round() as usize).clamp(1, groups.len());
    let mut rng = seeding::rng(seed);
    let mut picked = seeding::sample_indices(&mut rng, groups.len(), count);
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| groups[i].clone()).collect())
}

/// Generate a synthetic corpus: features uniform in `[0, 1]`, grades by
/// quantile-thresholding a fixed random linear score (roughly 30% of
/// documents end up with grade 3 or 4), split 60/20/20.
pub fn generate_synthetic_corpus(
    n_queries: usize,
    docs_per_query: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<CorpusSplit> {
    if n_queries == 0 || docs_per_query == 0 || feature_dim == 0 {
        return Err(Error::Validation(
            "n_queries, docs_per_query and feature_dim must be >= 1".into(),
        ));
    }
    let mut rng = seeding::rng(mix_tag(seed, "synthetic"));
    let grade_weights: Vec<f64> = (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut features: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_queries);
    let mut scores: Vec<f64> = Vec::with_capacity(n_queries * docs_per_query);
    for _ in 0..n_queries {
        let mut docs = Vec::with_capacity(docs_per_query);
        for _ in 0..docs_per_query {
            let f: Vec<f64> = (0..feature_dim).map(|_| rng.random::<f64>()).collect();
            scores.push(f.iter().zip(&grade_weights).map(|(a, b)| a * b).sum());
            docs.push(f);
        }
        features.push(docs);
    }

    // Grade thresholds at the 30/50/70/90 score percentiles, giving grade
    // proportions of roughly 30/20/20/20/10 percent for grades 0..4.
    let mut sorted = scores.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let quantile = |q: f64| {
        let idx = ((q * sorted.len() as f64) as usize).min(sorted.len() - 1);
        sorted[idx]
    };
    let thresholds = [quantile(0.30), quantile(0.50), quantile(0.70), quantile(0.90)];
    let grade_of = |score: f64| thresholds.iter().take_while(|&&t| score >= t).count() as u8;

    let mut groups = Vec::with_capacity(n_queries);
    let mut score_it = scores.into_iter();
    for (q, docs) in features.into_iter().enumerate() {
        let documents: Result<Vec<Document>> = docs
            .into_iter()
            .enumerate()
            .map(|(i, f)| Document::new(i, f, grade_of(score_it.next().unwrap())))
            .collect();
        groups.push(QueryGroup {
            query_id: q.to_string(),
            documents: documents?,
        });
    }

    let n_train = ((0.6 * n_queries as f64).round() as usize).min(n_queries);
    let n_val = ((0.2 * n_queries as f64).round() as usize).min(n_queries - n_train);
    let test = groups.split_off(n_train + n_val);
    let validation = groups.split_off(n_train);
    Ok(CorpusSplit {
        train: groups,
        validation,
        test,
        feature_dim,
        context_feature_indices: Vec::new(),
    })
}

const CACHE_HEADER: &str = "cltr-corpus-cache v1";

/// Dump a corpus split to the internal cache format (versioned text).
pub fn save_cache(split: &CorpusSplit, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{CACHE_HEADER}")?;
    writeln!(w, "feature_dim {}", split.feature_dim)?;
    write!(w, "context")?;
    for i in &split.context_feature_indices {
        write!(w, " {i}")?;
    }
    writeln!(w)?;
    for (name, groups) in [
        ("train", &split.train),
        ("validation", &split.validation),
        ("test", &split.test),
    ] {
        writeln!(w, "split {name} {}", groups.len())?;
        for g in groups {
            writeln!(w, "group {} {}", g.query_id, g.documents.len())?;
            for doc in &g.documents {
                write!(w, "doc {}", doc.grade)?;
                for v in &doc.features {
                    write!(w, " {v}")?;
                }
                writeln!(w)?;
            }
        }
    }
    Ok(())
}

/// Load a corpus split written by [`save_cache`].
pub fn load_cache(path: &Path) -> Result<CorpusSplit> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Format("unexpected end of cache file".into()))?
            .map_err(Error::from)
    };

    if next()? != CACHE_HEADER {
        return Err(Error::Format(format!("expected header `{CACHE_HEADER}`")));
    }
    let dim_line = next()?;
    let feature_dim: usize = dim_line
        .strip_prefix("feature_dim ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("bad feature_dim line".into()))?;
    let ctx_line = next()?;
    let context_feature_indices: Vec<usize> = ctx_line
        .strip_prefix("context")
        .ok_or_else(|| Error::Format("bad context line".into()))?
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad context index `{t}`")))
        })
        .collect::<Result<_>>()?;

    let mut splits: HashMap<String, Vec<QueryGroup>> = HashMap::new();
    for expected in ["train", "validation", "test"] {
        let header = next()?;
        let rest = header
            .strip_prefix("split ")
            .ok_or_else(|| Error::Format(format!("expected split header, got `{header}`")))?;
        let (name, count_str) = rest
            .split_once(' ')
            .ok_or_else(|| Error::Format("bad split header".into()))?;
        if name != expected {
            return Err(Error::Format(format!(
                "expected split `{expected}`, got `{name}`"
            )));
        }
        let count: usize = count_str
            .parse()
            .map_err(|_| Error::Format("bad split count".into()))?;
        let mut groups = Vec::with_capacity(count);
        for _ in 0..count {
            let gh = next()?;
            let rest = gh
                .strip_prefix("group ")
                .ok_or_else(|| Error::Format(format!("expected group header, got `{gh}`")))?;
            let (qid, ndocs_str) = rest
                .rsplit_once(' ')
                .ok_or_else(|| Error::Format("bad group header".into()))?;
            let ndocs: usize = ndocs_str
                .parse()
                .map_err(|_| Error::Format("bad document count".into()))?;
            if ndocs == 0 {
                return Err(Error::Format(format!("group `{qid}` has no documents")));
            }
            let mut documents = Vec::with_capacity(ndocs);
            for i in 0..ndocs {
                let dl = next()?;
                let rest = dl
                    .strip_prefix("doc ")
                    .ok_or_else(|| Error::Format(format!("expected doc line, got `{dl}`")))?;
                let mut toks = rest.split_whitespace();
                let grade: u8 = toks
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::Format("bad doc grade".into()))?;
                let features: Vec<f64> = toks
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| Error::Format(format!("bad feature value `{t}`")))
                    })
                    .collect::<Result<_>>()?;
                if features.len() != feature_dim {
                    return Err(Error::Format(format!(
                        "doc has {} features, expected {feature_dim}",
                        features.len()
                    )));
                }
                documents.push(Document::new(i, features, grade)?);
            }
            groups.push(QueryGroup {
                query_id: qid.to_string(),
                documents,
            });
        }
        splits.insert(expected.to_string(), groups);
    }
    Ok(CorpusSplit {
        train: splits.remove("train").unwrap(),
        validation: splits.remove("validation").unwrap(),
        test: splits.remove("test").unwrap(),
        feature_dim,
        context_feature_indices,
    })
}

/// Load a LETOR directory of `train.txt`, `vali.txt`, `test.txt` into one
/// split, padding all feature vectors to the common dimension.
pub fn load_letor_dir(dir: &Path) -> Result<CorpusSplit> {
    let read = |name: &str| -> Result<Vec<QueryGroup>> {
        let file = std::fs::File::open(dir.join(name))?;
        parse_letor(std::io::BufReader::new(file))
    };
    let mut train = read("train.txt")?;
    let mut validation = read("vali.txt")?;
    let mut test = read("test.txt")?;
    let dim_of = |groups: &[QueryGroup]| {
        groups
            .iter()
            .flat_map(|g| g.documents.iter())
            .map(|d| d.features.len())
            .max()
            .unwrap_or(0)
    };
    let feature_dim = dim_of(&train).max(dim_of(&validation)).max(dim_of(&test));
    pad_features(&mut train, feature_dim);
    pad_features(&mut validation, feature_dim);
    pad_features(&mut test, feature_dim);
    Ok(CorpusSplit {
        train,
        validation,
        test,
        feature_dim,
        context_feature_indices: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Vec<QueryGroup>> {
        parse_letor(std::io::Cursor::new(s.as_bytes()))
    }

    #[test]
    fn parses_single_line_with_padding() {
        let groups = parse("3 qid:7 1:0.5 3:1.0").unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].query_id, "7");
        let doc = &groups[0].documents[0];
        assert_eq!(doc.grade, 3);
        assert_eq!(doc.binary_rel, 1);
        assert_eq!(doc.features, vec![0.5, 0.0, 1.0]);
    }

    #[test]
    fn groups_by_qid_in_first_appearance_order() {
        let groups = parse("0 qid:1 1:0.0\n4 qid:1 1:1.0").unwrap();
        assert_eq!(groups.len(), 1);
        let grades: Vec<u8> = groups[0].documents.iter().map(|d| d.grade).collect();
        assert_eq!(grades, vec![0, 4]);
        assert_eq!(groups[0].documents[1].doc_index, 1);

        let two = parse("1 qid:b 1:0.1\n2 qid:a 1:0.2\n3 qid:b 1:0.3").unwrap();
        let ids: Vec<&str> = two.iter().map(|g| g.query_id.as_str()).collect();
        assert_eq!(ids, vec!["b", "a"]);
    }

    #[test]
    fn bad_value_is_a_parse_error_with_line() {
        let err = parse("3 qid:7 1:0.5\n2 qid:7 2:abc").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn grade_out_of_range_is_a_validation_error() {
        assert!(matches!(parse("7 qid:1 1:0.0"), Err(Error::Validation(_))));
    }

    #[test]
    fn non_increasing_indices_are_rejected() {
        assert!(matches!(
            parse("1 qid:1 2:0.5 2:0.6"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse("1 qid:1 3:0.5 1:0.6"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let groups = parse("# header\n\n3 qid:7 1:0.5 # trailing\n").unwrap();
        assert_eq!(groups[0].documents.len(), 1);
        assert_eq!(groups[0].documents[0].features, vec![0.5]);
    }

    #[test]
    fn missing_grade_or_qid_is_a_parse_error() {
        assert!(matches!(parse("qid:1 1:0.5"), Err(Error::Parse { .. })));
        assert!(matches!(parse("3 1:0.5"), Err(Error::Parse { .. })));
    }

    fn split_from(train: Vec<QueryGroup>, validation: Vec<QueryGroup>, test: Vec<QueryGroup>) -> CorpusSplit {
        let feature_dim = train[0].documents[0].features.len();
        CorpusSplit {
            train,
            validation,
            test,
            feature_dim,
            context_feature_indices: vec![],
        }
    }

    fn one_doc_group(qid: &str, features: Vec<f64>, grade: u8) -> QueryGroup {
        QueryGroup {
            query_id: qid.into(),
            documents: vec![Document::new(0, features, grade).unwrap()],
        }
    }

    #[test]
    fn min_max_normalization_uses_train_ranges() {
        let split = split_from(
            vec![
                one_doc_group("a", vec![0.0], 0),
                one_doc_group("b", vec![5.0], 0),
                one_doc_group("c", vec![10.0], 0),
            ],
            vec![],
            vec![one_doc_group("t", vec![20.0], 0)],
        );
        let norm = normalize_features(split);
        let train_vals: Vec<f64> = norm.train.iter().map(|g| g.documents[0].features[0]).collect();
        assert_eq!(train_vals, vec![0.0, 0.5, 1.0]);
        // Out-of-range test value clamps.
        assert_eq!(norm.test[0].documents[0].features[0], 1.0);
    }

    #[test]
    fn constant_features_normalize_to_zero() {
        let split = split_from(
            vec![one_doc_group("a", vec![3.0], 0), one_doc_group("b", vec![3.0], 0)],
            vec![one_doc_group("v", vec![3.0], 0)],
            vec![],
        );
        let norm = normalize_features(split);
        assert_eq!(norm.train[0].documents[0].features[0], 0.0);
        assert_eq!(norm.validation[0].documents[0].features[0], 0.0);
    }

    #[test]
    fn subsampling_rounds_and_is_deterministic() {
        let groups: Vec<QueryGroup> = (0..200)
            .map(|i| one_doc_group(&i.to_string(), vec![0.0], 0))
            .collect();
        let all = subsample_queries(&groups, 1.0, 9).unwrap();
        assert_eq!(all.len(), 200);
        let two = subsample_queries(&groups, 0.01, 9).unwrap();
        assert_eq!(two.len(), 2);
        let again = subsample_queries(&groups, 0.01, 9).unwrap();
        assert_eq!(two, again);
        assert!(subsample_queries(&[], 0.5, 1).is_err());
        assert!(subsample_queries(&groups, 0.0, 1).is_err());
    }

    #[test]
    fn synthetic_corpus_splits_and_reproduces() {
        let split = generate_synthetic_corpus(10, 10, 4, 3).unwrap();
        assert_eq!(split.train.len(), 6);
        assert_eq!(split.validation.len(), 2);
        assert_eq!(split.test.len(), 2);
        let again = generate_synthetic_corpus(10, 10, 4, 3).unwrap();
        assert_eq!(
            serde_json::to_string(&split).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }

    #[test]
    fn synthetic_grades_span_all_levels() {
        let split = generate_synthetic_corpus(100, 10, 1, 5).unwrap();
        let mut hist = [0usize; 5];
        let mut total = 0usize;
        let mut relevant = 0usize;
        for g in split.all_groups() {
            for d in &g.documents {
                hist[d.grade as usize] += 1;
                total += 1;
                relevant += usize::from(d.binary_rel == 1);
            }
        }
        assert!(hist.iter().all(|&c| c > 0), "histogram {hist:?}");
        let frac = relevant as f64 / total as f64;
        assert!((0.25..=0.35).contains(&frac), "relevant fraction {frac}");
    }

    #[test]
    fn context_selection_finds_the_informative_feature() {
        // binary_rel equals 1[feature_0 > 0.5]; everything else is noise.
        let mut rng = seeding::rng(17);
        let mut groups = Vec::new();
        for q in 0..40 {
            let documents = (0..10)
                .map(|i| {
                    let f: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
                    let grade = if f[0] > 0.5 { 4 } else { 0 };
                    Document::new(i, f, grade).unwrap()
                })
                .collect();
            groups.push(QueryGroup {
                query_id: q.to_string(),
                documents,
            });
        }
        let selected = select_context_features(&groups, &[], 1, 7).unwrap();

        // Independent oracle: single-feature split accuracy by brute force.
        let mut best_feature = 0;
        let mut best_acc = 0.0;
        for f in 0..5 {
            let mut pairs: Vec<(f64, u8)> = groups
                .iter()
                .flat_map(|g| g.documents.iter().map(move |d| (d.features[f], d.binary_rel)))
                .collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let total = pairs.len();
            let total_pos: usize = pairs.iter().filter(|p| p.1 == 1).count();
            let mut pos_left = 0usize;
            for i in 1..total {
                pos_left += usize::from(pairs[i - 1].1 == 1);
                let neg_left = i - pos_left;
                // predict 1 on the right side
                let correct = neg_left + (total_pos - pos_left);
                let acc = (correct.max(total - correct)) as f64 / total as f64;
                if acc > best_acc {
                    best_acc = acc;
                    best_feature = f;
                }
            }
        }
        assert_eq!(best_feature, 0, "oracle should agree the signal is feature 0");
        assert_eq!(selected, vec![0]);
    }

    #[test]
    fn selecting_all_features_returns_ascending_indices() {
        let split = generate_synthetic_corpus(30, 8, 6, 2).unwrap();
        let selected = select_context_features(&split.train, &split.validation, 6, 3).unwrap();
        assert_eq!(selected, vec![0, 1, 2, 3, 4, 5]);
        assert!(select_context_features(&split.train, &split.validation, 7, 3).is_err());
    }

    #[test]
    fn duplicated_signal_prefers_lower_index_only_on_exact_ties() {
        let mut rng = seeding::rng(23);
        let mut groups = Vec::new();
        for q in 0..30 {
            let documents = (0..10)
                .map(|i| {
                    let signal: f64 = rng.random();
                    let mut f = vec![0.0; 6];
                    for (j, slot) in f.iter_mut().enumerate() {
                        *slot = if j == 2 || j == 5 { signal } else { rng.random() };
                    }
                    let grade = if signal > 0.5 { 4 } else { 0 };
                    Document::new(i, f, grade).unwrap()
                })
                .collect();
            groups.push(QueryGroup {
                query_id: q.to_string(),
                documents,
            });
        }
        let selected = select_context_features(&groups, &[], 1, 11).unwrap();
        let x: Vec<Vec<f64>> = groups
            .iter()
            .flat_map(|g| g.documents.iter().map(|d| d.features.clone()))
            .collect();
        let y: Vec<f64> = groups
            .iter()
            .flat_map(|g| g.documents.iter().map(|d| f64::from(d.binary_rel)))
            .collect();
        let forest = RegressionForest::fit(&x, &y, &importance_forest_config(11)).unwrap();
        let imp = forest.feature_importance();
        if (imp[2] - imp[5]).abs() < 1e-15 {
            assert_eq!(selected, vec![2]);
        } else if imp[2] > imp[5] {
            assert_eq!(selected, vec![2]);
        } else {
            assert_eq!(selected, vec![5]);
        }
    }

    #[test]
    fn cache_round_trips() {
        let mut split = generate_synthetic_corpus(12, 5, 3, 1).unwrap();
        split.context_feature_indices = vec![0, 2];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.cache");
        save_cache(&split, &path).unwrap();
        let loaded = load_cache(&path).unwrap();
        assert_eq!(
            serde_json::to_string(&split).unwrap(),
            serde_json::to_string(&loaded).unwrap()
        );
        // header tampering is rejected
        std::fs::write(&path, "wrong header\n").unwrap();
        assert!(matches!(load_cache(&path), Err(Error::Format(_))));
    }
}
