//! Linear pairwise learning-to-rank with weighted hinge loss and L2
//! regularization. One implementation serves the production ranker and all
//! debiased ranker variants; they differ only in how their training lists
//! are labeled and weighted.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{subsample_queries, CorpusSplit, QueryGroup};
use crate::error::{Error, Result};
use crate::seeding::{self, mix_tag};

/// Linear scoring model over the full corpus feature dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearRankModel {
    pub weights: Vec<f64>,
    pub l2: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl LinearRankModel {
    pub fn score(&self, features: &[f64]) -> f64 {
        dot(&self.weights, features)
    }

    /// Document indices sorted by descending score, ties by ascending
    /// `doc_index` (i.e. original file order).
    pub fn rank(&self, group: &QueryGroup) -> Vec<usize> {
        let scores: Vec<f64> = group.documents.iter().map(|d| self.score(&d.features)).collect();
        let mut order: Vec<usize> = (0..group.documents.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then(group.documents[a].doc_index.cmp(&group.documents[b].doc_index))
        });
        order.into_iter().map(|i| group.documents[i].doc_index).collect()
    }

    /// Flat text dump: one header line, then one weight per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            w,
            "cltr-ltr v1 dim={} l2={} lr={} epochs={} seed={}",
            self.weights.len(),
            self.l2,
            self.lr,
            self.epochs,
            self.seed
        )?;
        for v in &self.weights {
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty model file".into()))??;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("cltr-ltr") || fields.next() != Some("v1") {
            return Err(Error::Format("expected `cltr-ltr v1` header".into()));
        }
        let mut dim = 0usize;
        let mut l2 = 0.0;
        let mut lr = 0.0;
        let mut epochs = 0usize;
        let mut seed = 0u64;
        for kv in fields {
            let (key, val) = kv
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field `{kv}`")))?;
            match key {
                "dim" => dim = val.parse().map_err(|_| Error::Format("bad dim".into()))?,
                "l2" => l2 = val.parse().map_err(|_| Error::Format("bad l2".into()))?,
                "lr" => lr = val.parse().map_err(|_| Error::Format("bad lr".into()))?,
                "epochs" => epochs = val.parse().map_err(|_| Error::Format("bad epochs".into()))?,
                "seed" => seed = val.parse().map_err(|_| Error::Format("bad seed".into()))?,
                other => return Err(Error::Format(format!("unknown header field `{other}`"))),
            }
        }
        let weights: Vec<f64> = lines
            .map(|l| {
                let l = l?;
                l.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad weight `{l}`")))
            })
            .collect::<Result<_>>()?;
        if weights.len() != dim {
            return Err(Error::Format(format!(
                "header says dim={dim} but found {} weights",
                weights.len()
            )));
        }
        Ok(LinearRankModel {
            weights,
            l2,
            lr,
            epochs,
            seed,
        })
    }
}

/// Training hyperparameters for the pairwise ranker.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LtrConfig {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
}

impl Default for LtrConfig {
    fn default() -> Self {
        LtrConfig {
            lr: 0.01,
            epochs: 100,
            l2: 1e-4,
        }
    }
}

/// One weighted document inside a training list.
///
/// A document can carry both a positive and a negative part: resampled
/// click counts split each document into `resampled_clicks` click events
/// and `n_obs - resampled_clicks` non-click events, and the pairwise loss
/// pairs the click side of one document against the non-click side of
/// another. Plain binary labels set one side to 1 and the other to 0.
#[derive(Debug, Clone)]
pub struct TrainingDoc {
    pub doc_index: usize,
    pub features: Vec<f64>,
    /// Click mass: IPS weight of the document's clicks, or its resampled
    /// click count.
    pub pos_weight: f64,
    /// Non-click mass: 1 for plain negatives, or the resampled non-click
    /// count.
    pub neg_weight: f64,
}

impl TrainingDoc {
    pub fn positive(doc_index: usize, features: Vec<f64>, weight: f64) -> Self {
        TrainingDoc {
            doc_index,
            features,
            pos_weight: weight,
            neg_weight: 0.0,
        }
    }

    pub fn negative(doc_index: usize, features: Vec<f64>) -> Self {
        TrainingDoc {
            doc_index,
            features,
            pos_weight: 0.0,
            neg_weight: 1.0,
        }
    }

    /// Whether the document acts as a positive anywhere in the loss.
    pub fn is_positive(&self) -> bool {
        self.pos_weight > 0.0
    }
}

/// A per-query training list.
#[derive(Debug, Clone)]
pub struct TrainingList {
    pub query_id: String,
    pub docs: Vec<TrainingDoc>,
}

/// A (positive, negative) feature pair carrying the positive's weight.
#[derive(Debug, Clone)]
pub struct WeightedPair {
    pub query_id: String,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    pub weight: f64,
}

/// Expand training lists into weighted (positive, negative) pairs.
///
/// Every document with click mass is paired against every *other*
/// document with non-click mass in the same list; the pair weight is the
/// product of the two masses. Zero-mass sides and single-sided lists
/// contribute nothing.
pub fn expand_pairs(lists: &[TrainingList]) -> Vec<WeightedPair> {
    let mut pairs = Vec::new();
    for list in lists {
        for pos in list.docs.iter().filter(|d| d.pos_weight > 0.0) {
            for neg in &list.docs {
                if neg.doc_index == pos.doc_index || neg.neg_weight <= 0.0 {
                    continue;
                }
                pairs.push(WeightedPair {
                    query_id: list.query_id.clone(),
                    positive: pos.features.clone(),
                    negative: neg.features.clone(),
                    weight: pos.pos_weight * neg.neg_weight,
                });
            }
        }
    }
    pairs
}

/// The full training objective:
/// `(1/|pairs|) sum w_p * max(0, 1 - (s(pos) - s(neg))) + l2 * ||w||^2`
/// and its gradient. Used for gradient checks and loss reporting; training
/// itself runs stochastically.
pub fn pairwise_loss_grad(weights: &[f64], pairs: &[WeightedPair], l2: f64) -> (f64, Vec<f64>) {
    let n = pairs.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; weights.len()];
    for pair in pairs {
        let margin = dot(weights, &pair.positive) - dot(weights, &pair.negative);
        let hinge = (1.0 - margin).max(0.0);
        loss += pair.weight * hinge;
        if hinge > 0.0 {
            for (g, (xp, xn)) in grad.iter_mut().zip(pair.positive.iter().zip(&pair.negative)) {
                *g -= pair.weight * (xp - xn);
            }
        }
    }
    loss /= n;
    let norm2: f64 = weights.iter().map(|w| w * w).sum();
    loss += l2 * norm2;
    for (g, w) in grad.iter_mut().zip(weights) {
        *g = *g / n + 2.0 * l2 * w;
    }
    (loss, grad)
}

/// Stochastic training of the pairwise hinge objective.
///
/// Per pair: a subgradient step on the weighted hinge followed by an
/// implicit (proximal) L2 step `w <- w / (1 + 2*lr*l2)`, which stays stable
/// for arbitrarily large `l2` where the explicit gradient would diverge.
pub fn train_pairwise(
    pairs: &[WeightedPair],
    l2: f64,
    lr: f64,
    epochs: usize,
    seed: u64,
) -> Result<LinearRankModel> {
    if pairs.is_empty() {
        return Err(Error::Validation("no training pairs".into()));
    }
    let dim = pairs[0].positive.len();
    if pairs.iter().any(|p| p.positive.len() != dim || p.negative.len() != dim) {
        return Err(Error::Validation("ragged pair features".into()));
    }

    let mut weights = vec![0.0f64; dim];
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = seeding::rng(seed);
    let shrink = 1.0 / (1.0 + 2.0 * lr * l2);

    for epoch in 0..epochs {
        seeding::shuffle(&mut rng, &mut order);
        for &i in &order {
            let pair = &pairs[i];
            let margin = dot(&weights, &pair.positive) - dot(&weights, &pair.negative);
            if margin < 1.0 {
                let step = lr * pair.weight;
                for (w, (xp, xn)) in weights.iter_mut().zip(pair.positive.iter().zip(&pair.negative)) {
                    *w += step * (xp - xn);
                }
            }
            for w in &mut weights {
                *w *= shrink;
            }
        }
        let (loss, _) = pairwise_loss_grad(&weights, pairs, l2);
        if !loss.is_finite() {
            return Err(Error::Training {
                epoch,
                msg: format!("non-finite training loss {loss}"),
            });
        }
    }
    Ok(LinearRankModel {
        weights,
        l2,
        lr,
        epochs,
        seed,
    })
}

/// Train the production ranker on a small fraction of the train+validation
/// queries, with binary relevance as labels.
///
/// If the subsample yields no usable pairs the fraction falls back to 10%
/// (with a warning); if that still yields nothing, the corpus cannot train
/// a ranker and an error is returned.
pub fn train_production_ranker(
    corpus: &CorpusSplit,
    fraction: f64,
    cfg: &LtrConfig,
    seed: u64,
) -> Result<LinearRankModel> {
    let pool = corpus.train_and_validation();
    let mut pairs = relevance_pairs(&pool, fraction, mix_tag(seed, "subsample"))?;
    if pairs.is_empty() && fraction < 0.1 {
        log::warn!(
            "production-ranker subsample at fraction {fraction} produced no pairs; retrying at 0.10"
        );
        pairs = relevance_pairs(&pool, 0.1, mix_tag(seed, "subsample-fallback"))?;
    }
    if pairs.is_empty() {
        return Err(Error::Validation(
            "no (relevant, irrelevant) pairs available for the production ranker".into(),
        ));
    }
    train_pairwise(&pairs, cfg.l2, cfg.lr, cfg.epochs, mix_tag(seed, "sgd"))
}

fn relevance_pairs(pool: &[QueryGroup], fraction: f64, seed: u64) -> Result<Vec<WeightedPair>> {
    let sampled = subsample_queries(pool, fraction, seed)?;
    let lists: Vec<TrainingList> = sampled
        .iter()
        .map(|g| TrainingList {
            query_id: g.query_id.clone(),
            docs: g
                .documents
                .iter()
                .map(|d| {
                    if d.binary_rel == 1 {
                        TrainingDoc::positive(d.doc_index, d.features.clone(), 1.0)
                    } else {
                        TrainingDoc::negative(d.doc_index, d.features.clone())
                    }
                })
                .collect(),
        })
        .collect();
    Ok(expand_pairs(&lists))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(pos: Vec<f64>, neg: Vec<f64>, weight: f64) -> WeightedPair {
        WeightedPair {
            query_id: "q".into(),
            positive: pos,
            negative: neg,
            weight,
        }
    }

    fn list(labels_weights: &[(u8, f64)]) -> TrainingList {
        TrainingList {
            query_id: "q".into(),
            docs: labels_weights
                .iter()
                .enumerate()
                .map(|(i, &(label, weight))| {
                    if label == 1 {
                        TrainingDoc::positive(i, vec![i as f64], weight)
                    } else {
                        TrainingDoc::negative(i, vec![i as f64])
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn expansion_combinatorics() {
        let lists = vec![list(&[(1, 1.0), (1, 1.0), (0, 1.0), (0, 1.0), (0, 1.0)])];
        assert_eq!(expand_pairs(&lists).len(), 6);
        let all_pos = vec![list(&[(1, 1.0), (1, 1.0)])];
        assert!(expand_pairs(&all_pos).is_empty());
    }

    #[test]
    fn pair_weight_is_the_positives_weight() {
        let lists = vec![list(&[(1, 4.0), (0, 1.0), (0, 1.0)])];
        let pairs = expand_pairs(&lists);
        assert_eq!(pairs.len(), 2);
        assert!(pairs.iter().all(|p| p.weight == 4.0));
    }

    #[test]
    fn zero_weight_positives_are_dropped() {
        let lists = vec![list(&[(1, 0.0), (0, 1.0)])];
        assert!(expand_pairs(&lists).is_empty());
    }

    #[test]
    fn fractional_documents_pair_on_both_sides_but_not_with_themselves() {
        // one doc with 2 clicks of 5 impressions, one fully clicked, one
        // plain negative
        let lists = vec![TrainingList {
            query_id: "q".into(),
            docs: vec![
                TrainingDoc {
                    doc_index: 0,
                    features: vec![0.0],
                    pos_weight: 2.0,
                    neg_weight: 3.0,
                },
                TrainingDoc {
                    doc_index: 1,
                    features: vec![1.0],
                    pos_weight: 5.0,
                    neg_weight: 0.0,
                },
                TrainingDoc::negative(2, vec![2.0]),
            ],
        }];
        let pairs = expand_pairs(&lists);
        // doc0 pos vs doc2 (2*1), doc1 pos vs doc0 neg (5*3) and doc2 (5*1)
        assert_eq!(pairs.len(), 3);
        let total: f64 = pairs.iter().map(|p| p.weight).sum();
        assert_eq!(total, 2.0 + 15.0 + 5.0);
        // no self pairs
        for p in &pairs {
            assert_ne!(p.positive, p.negative);
        }
    }

    #[test]
    fn separable_data_reaches_full_pair_accuracy() {
        // Positives always carry the larger single feature value.
        let pairs: Vec<WeightedPair> = (0..20)
            .map(|i| pair(vec![1.0 + 0.01 * i as f64], vec![0.2], 1.0))
            .collect();
        let model = train_pairwise(&pairs, 1e-4, 0.05, 100, 3).unwrap();
        assert!(model.weights[0] > 0.0);
        let correct = pairs
            .iter()
            .filter(|p| model.score(&p.positive) > model.score(&p.negative))
            .count();
        assert_eq!(correct, pairs.len());
    }

    #[test]
    fn huge_l2_crushes_the_weights() {
        let pairs: Vec<WeightedPair> = (0..10)
            .map(|_| pair(vec![1.0, 0.3], vec![0.0, 0.8], 1.0))
            .collect();
        let model = train_pairwise(&pairs, 1e6, 0.01, 50, 3).unwrap();
        let norm = model.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!(norm < 1e-2, "norm {norm}");
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mut rng = seeding::rng(8);
        use rand::Rng;
        let pairs: Vec<WeightedPair> = (0..15)
            .map(|_| {
                pair(
                    (0..4).map(|_| rng.random::<f64>()).collect(),
                    (0..4).map(|_| rng.random::<f64>()).collect(),
                    rng.random_range(0.5..2.0),
                )
            })
            .collect();
        // A weight vector away from any hinge kink (margins well below 1).
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(-0.3..0.3)).collect();
        let (_, grad) = pairwise_loss_grad(&w, &pairs, 0.01);
        let h = 1e-6;
        for j in 0..4 {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[j] += h;
            wm[j] -= h;
            let (lp, _) = pairwise_loss_grad(&wp, &pairs, 0.01);
            let (lm, _) = pairwise_loss_grad(&wm, &pairs, 0.01);
            let fd = (lp - lm) / (2.0 * h);
            let rel = (grad[j] - fd).abs() / grad[j].abs().max(1e-8);
            assert!(rel < 1e-5, "component {j}: analytic {} vs fd {fd}", grad[j]);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let pairs: Vec<WeightedPair> =
            (0..8).map(|i| pair(vec![i as f64, 1.0], vec![0.0, 0.5], 1.0)).collect();
        let a = train_pairwise(&pairs, 1e-4, 0.01, 20, 5).unwrap();
        let b = train_pairwise(&pairs, 1e-4, 0.01, 20, 5).unwrap();
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn ranking_ties_preserve_file_order() {
        use crate::corpus::Document;
        let group = QueryGroup {
            query_id: "q".into(),
            documents: (0..3)
                .map(|i| Document::new(i, vec![1.0], 0).unwrap())
                .collect(),
        };
        let model = LinearRankModel {
            weights: vec![0.0],
            l2: 0.0,
            lr: 0.0,
            epochs: 0,
            seed: 0,
        };
        assert_eq!(model.rank(&group), vec![0, 1, 2]);
    }

    #[test]
    fn model_save_load_round_trips() {
        let model = LinearRankModel {
            weights: vec![0.25, -1.5, 3e-7],
            l2: 1e-4,
            lr: 0.01,
            epochs: 100,
            seed: 9,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        model.save(&path).unwrap();
        let loaded = LinearRankModel::load(&path).unwrap();
        assert_eq!(model.weights, loaded.weights);
        assert_eq!(model.epochs, loaded.epochs);
        std::fs::write(&path, "bogus\n1.0\n").unwrap();
        assert!(LinearRankModel::load(&path).is_err());
    }

    #[test]
    fn scale_invariance_of_ranking() {
        use crate::corpus::Document;
        let mut rng = seeding::rng(4);
        use rand::Rng;
        let group = QueryGroup {
            query_id: "q".into(),
            documents: (0..12)
                .map(|i| {
                    Document::new(i, (0..3).map(|_| rng.random::<f64>()).collect(), 0).unwrap()
                })
                .collect(),
        };
        let model = LinearRankModel {
            weights: vec![0.7, -0.2, 1.3],
            l2: 0.0,
            lr: 0.0,
            epochs: 0,
            seed: 0,
        };
        let base = model.rank(&group);
        // powers of two scale scores exactly, so the ordering cannot move
        for exp in [-3i32, 1, 8] {
            let c = (2.0f64).powi(exp);
            let scaled = LinearRankModel {
                weights: model.weights.iter().map(|w| w * c).collect(),
                ..model.clone()
            };
            assert_eq!(scaled.rank(&group), base);
        }
    }
}
