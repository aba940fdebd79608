//! Causal forest: leaf-level treatment-effect estimates with
//! heterogeneity-maximizing splits and optional honest subsampling.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{candidate_boundaries, midpoint, validate_matrix, ForestConfig, TreeNode};
use crate::error::{Error, Result};
use crate::seeding::{mix_index, rng, sample_indices};

/// Ensemble of causal trees.
///
/// Each leaf stores the difference of arm means over its estimation sample;
/// a prediction averages the leaf values of every tree whose leaf for `x`
/// has both arms populated, falling back to the global difference of arm
/// means when no tree qualifies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CausalForest {
    trees: Vec<TreeNode>,
    global_tau: f64,
    n_features: usize,
}

impl CausalForest {
    /// Fit on rows `(x, y)` with binary treatment indicators `p`
    /// (1 = treated).
    ///
    /// Per tree: draw a row subsample; when `cfg.honest`, split it into a
    /// build half that chooses splits and an estimate half that populates
    /// the leaves. A split is admissible only if both children keep at
    /// least `min_leaf_per_arm` rows of each arm in the half used for
    /// splitting; the split score is
    /// `(n_l * n_r) / (n_l + n_r)^2 * (tau_l - tau_r)^2`.
    pub fn fit(x: &[Vec<f64>], y: &[f64], p: &[u8], cfg: &ForestConfig) -> Result<Self> {
        cfg.validate()?;
        let d = validate_matrix(x)?;
        if x.len() != y.len() || x.len() != p.len() {
            return Err(Error::Validation(format!(
                "row/target/treatment counts differ: {}/{}/{}",
                x.len(),
                y.len(),
                p.len()
            )));
        }
        if p.iter().any(|&v| v > 1) {
            return Err(Error::Validation("treatment indicators must be 0 or 1".into()));
        }
        let n1 = p.iter().filter(|&&v| v == 1).count();
        let n0 = p.len() - n1;
        if n1 == 0 || n0 == 0 {
            return Err(Error::Fit(format!(
                "both arms must be present (treated={n1}, control={n0})"
            )));
        }

        let sum1: f64 = y.iter().zip(p).filter(|(_, &t)| t == 1).map(|(v, _)| v).sum();
        let sum0: f64 = y.iter().zip(p).filter(|(_, &t)| t == 0).map(|(v, _)| v).sum();
        let global_tau = sum1 / n1 as f64 - sum0 / n0 as f64;

        let n = x.len();
        let subsample = ((cfg.subsample_fraction * n as f64).round() as usize).clamp(1, n);
        let n_cand = cfg.resolved_candidate_features(d);

        let trees: Vec<TreeNode> = (0..cfg.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut tree_rng = rng(mix_index(cfg.seed, t as u64));
                let rows = sample_indices(&mut tree_rng, n, subsample);
                let (build_rows, estimate_rows) = if cfg.honest {
                    let half = rows.len() / 2;
                    (rows[..half].to_vec(), rows[half..].to_vec())
                } else {
                    (rows.clone(), rows)
                };
                let mut builder = CausalTreeBuilder {
                    x,
                    y,
                    p,
                    min_leaf_per_arm: cfg.min_leaf_per_arm,
                    max_depth: cfg.max_depth,
                    n_cand,
                    n_features: d,
                    rng: tree_rng,
                };
                let mut root = builder.build(build_rows, 0);
                populate_leaves(&mut root, estimate_rows, x, y, p);
                root
            })
            .collect();

        Ok(CausalForest {
            trees,
            global_tau,
            n_features: d,
        })
    }

    /// Treatment-effect estimate for one point.
    pub fn predict(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.n_features);
        let mut sum = 0.0;
        let mut count = 0usize;
        for tree in &self.trees {
            if let TreeNode::Leaf {
                value,
                n_treated,
                n_control,
                ..
            } = tree.leaf_for(x)
            {
                if *n_treated > 0 && *n_control > 0 {
                    sum += *value;
                    count += 1;
                }
            }
        }
        if count > 0 {
            sum / count as f64
        } else {
            self.global_tau
        }
    }

    /// Per-row effect estimates; errors on a feature-dimension mismatch.
    pub fn predict_rows(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        if xs.iter().any(|r| r.len() != self.n_features) {
            return Err(Error::Validation(format!(
                "expected {} features per row",
                self.n_features
            )));
        }
        Ok(xs.iter().map(|r| self.predict(r)).collect())
    }

    /// Difference of arm means over the full training data; the prediction
    /// fallback when no tree has both arms at the routed leaf.
    pub fn global_tau(&self) -> f64 {
        self.global_tau
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn trees(&self) -> &[TreeNode] {
        &self.trees
    }
}

/// Fill leaf statistics from the estimation sample. Leaves whose sample
/// misses an arm keep value 0 and are skipped at prediction time.
fn populate_leaves(node: &mut TreeNode, rows: Vec<usize>, x: &[Vec<f64>], y: &[f64], p: &[u8]) {
    match node {
        TreeNode::Leaf {
            value,
            n_samples,
            n_treated,
            n_control,
        } => {
            let mut s1 = 0.0;
            let mut s0 = 0.0;
            let mut c1 = 0usize;
            let mut c0 = 0usize;
            for &i in &rows {
                if p[i] == 1 {
                    s1 += y[i];
                    c1 += 1;
                } else {
                    s0 += y[i];
                    c0 += 1;
                }
            }
            *n_treated = c1;
            *n_control = c0;
            *n_samples = c1 + c0;
            *value = if c1 > 0 && c0 > 0 {
                s1 / c1 as f64 - s0 / c0 as f64
            } else {
                0.0
            };
        }
        TreeNode::Internal {
            feature_index,
            threshold,
            left,
            right,
        } => {
            let (l, r): (Vec<usize>, Vec<usize>) = rows
                .into_iter()
                .partition(|&i| x[i][*feature_index] <= *threshold);
            populate_leaves(left, l, x, y, p);
            populate_leaves(right, r, x, y, p);
        }
    }
}

struct CausalTreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    p: &'a [u8],
    min_leaf_per_arm: usize,
    max_depth: usize,
    n_cand: usize,
    n_features: usize,
    rng: ChaCha8Rng,
}

struct CausalSplit {
    feature: usize,
    threshold: f64,
    score: f64,
}

impl CausalTreeBuilder<'_> {
    fn build(&mut self, rows: Vec<usize>, depth: usize) -> TreeNode {
        let m = self.min_leaf_per_arm;
        let n1 = rows.iter().filter(|&&i| self.p[i] == 1).count();
        let n0 = rows.len() - n1;
        // Each child needs >= m per arm, so the node needs >= 2m per arm.
        if depth >= self.max_depth || n1 < 2 * m || n0 < 2 * m {
            return TreeNode::empty_leaf();
        }
        let Some(split) = self.best_split(&rows) else {
            return TreeNode::empty_leaf();
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
            .into_iter()
            .partition(|&i| self.x[i][split.feature] <= split.threshold);
        TreeNode::Internal {
            feature_index: split.feature,
            threshold: split.threshold,
            left: Box::new(self.build(left_rows, depth + 1)),
            right: Box::new(self.build(right_rows, depth + 1)),
        }
    }

    fn best_split(&mut self, rows: &[usize]) -> Option<CausalSplit> {
        let n = rows.len();
        let m = self.min_leaf_per_arm;
        let features = sample_indices(&mut self.rng, self.n_features, self.n_cand);
        let mut best: Option<CausalSplit> = None;

        let mut ord: Vec<usize> = Vec::with_capacity(n);
        for f in features {
            ord.clear();
            ord.extend_from_slice(rows);
            ord.sort_unstable_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));

            let values: Vec<f64> = ord.iter().map(|&i| self.x[i][f]).collect();
            let boundaries = candidate_boundaries(&values);
            if boundaries.is_empty() {
                continue;
            }

            // Prefix counts and outcome sums per arm along the sorted order.
            let mut pre_n1 = Vec::with_capacity(n + 1);
            let mut pre_s1 = Vec::with_capacity(n + 1);
            let mut pre_n0 = Vec::with_capacity(n + 1);
            let mut pre_s0 = Vec::with_capacity(n + 1);
            pre_n1.push(0usize);
            pre_s1.push(0.0f64);
            pre_n0.push(0usize);
            pre_s0.push(0.0f64);
            for &i in &ord {
                let treated = self.p[i] == 1;
                pre_n1.push(pre_n1.last().unwrap() + usize::from(treated));
                pre_s1.push(pre_s1.last().unwrap() + if treated { self.y[i] } else { 0.0 });
                pre_n0.push(pre_n0.last().unwrap() + usize::from(!treated));
                pre_s0.push(pre_s0.last().unwrap() + if treated { 0.0 } else { self.y[i] });
            }
            let (tot_n1, tot_s1) = (*pre_n1.last().unwrap(), *pre_s1.last().unwrap());
            let (tot_n0, tot_s0) = (*pre_n0.last().unwrap(), *pre_s0.last().unwrap());

            for &b in &boundaries {
                let (l_n1, l_s1) = (pre_n1[b], pre_s1[b]);
                let (l_n0, l_s0) = (pre_n0[b], pre_s0[b]);
                let (r_n1, r_s1) = (tot_n1 - l_n1, tot_s1 - l_s1);
                let (r_n0, r_s0) = (tot_n0 - l_n0, tot_s0 - l_s0);
                if l_n1 < m || l_n0 < m || r_n1 < m || r_n0 < m {
                    continue;
                }
                let tau_l = l_s1 / l_n1 as f64 - l_s0 / l_n0 as f64;
                let tau_r = r_s1 / r_n1 as f64 - r_s0 / r_n0 as f64;
                let nl = (l_n1 + l_n0) as f64;
                let nr = (r_n1 + r_n0) as f64;
                let diff = tau_l - tau_r;
                let score = nl * nr / ((nl + nr) * (nl + nr)) * diff * diff;
                if score > 1e-15 && best.as_ref().is_none_or(|s| score > s.score) {
                    best = Some(CausalSplit {
                        feature: f,
                        threshold: midpoint(values[b - 1], values[b]),
                        score,
                    });
                }
            }
        }
        best
    }
}
