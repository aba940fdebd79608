//! CART regression forest with variance-reduction splits.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{candidate_boundaries, midpoint, validate_matrix, ForestConfig, TreeNode};
use crate::error::{Error, Result};
use crate::seeding::{mix_index, rng, sample_indices};

/// Ensemble of regression trees; prediction is the mean over trees.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionForest {
    trees: Vec<TreeNode>,
    /// Per-feature total impurity decrease, summed over all trees.
    split_gains: Vec<f64>,
    n_features: usize,
}

impl RegressionForest {
    /// Fit `cfg.n_trees` trees on row subsamples of `(x, y)`.
    ///
    /// Each split minimizes the weighted child variance over
    /// `n_candidate_features` randomly drawn features; leaf values are the
    /// mean of the targets routed there.
    pub fn fit(x: &[Vec<f64>], y: &[f64], cfg: &ForestConfig) -> Result<Self> {
        cfg.validate()?;
        let d = validate_matrix(x)?;
        if x.len() != y.len() {
            return Err(Error::Validation(format!(
                "row count {} does not match target count {}",
                x.len(),
                y.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite target".into()));
        }

        let n = x.len();
        let subsample = ((cfg.subsample_fraction * n as f64).round() as usize).clamp(1, n);
        let n_cand = cfg.resolved_candidate_features(d);

        let per_tree: Vec<(TreeNode, Vec<f64>)> = (0..cfg.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut tree_rng = rng(mix_index(cfg.seed, t as u64));
                let rows = sample_indices(&mut tree_rng, n, subsample);
                let mut builder = TreeBuilder {
                    x,
                    y,
                    min_leaf: cfg.min_leaf,
                    max_depth: cfg.max_depth,
                    n_cand,
                    n_features: d,
                    rng: tree_rng,
                    gains: vec![0.0; d],
                };
                let root = builder.build(rows, 0);
                (root, builder.gains)
            })
            .collect();

        let mut split_gains = vec![0.0; d];
        let mut trees = Vec::with_capacity(cfg.n_trees);
        for (tree, gains) in per_tree {
            for (acc, g) in split_gains.iter_mut().zip(&gains) {
                *acc += g;
            }
            trees.push(tree);
        }
        Ok(RegressionForest {
            trees,
            split_gains,
            n_features: d,
        })
    }

    /// Mean leaf value over all trees.
    pub fn predict(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.n_features);
        let sum: f64 = self
            .trees
            .iter()
            .map(|t| match t.leaf_for(x) {
                TreeNode::Leaf { value, .. } => *value,
                _ => unreachable!("leaf_for returns leaves"),
            })
            .sum();
        sum / self.trees.len() as f64
    }

    pub fn predict_rows(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        if xs.iter().any(|r| r.len() != self.n_features) {
            return Err(Error::Validation(format!(
                "expected {} features per row",
                self.n_features
            )));
        }
        Ok(xs.iter().map(|r| self.predict(r)).collect())
    }

    /// Per-feature impurity-decrease importance, normalized to sum to 1.
    ///
    /// Each split contributes `(parent impurity - weighted child impurity) x
    /// parent sample count`; a forest with no splits yields the zero vector.
    pub fn feature_importance(&self) -> Vec<f64> {
        let total: f64 = self.split_gains.iter().sum();
        if total <= 0.0 {
            return vec![0.0; self.n_features];
        }
        self.split_gains.iter().map(|g| g / total).collect()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn trees(&self) -> &[TreeNode] {
        &self.trees
    }
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    min_leaf: usize,
    max_depth: usize,
    n_cand: usize,
    n_features: usize,
    rng: ChaCha8Rng,
    gains: Vec<f64>,
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl TreeBuilder<'_> {
    fn build(&mut self, rows: Vec<usize>, depth: usize) -> TreeNode {
        let n = rows.len();
        let sum: f64 = rows.iter().map(|&i| self.y[i]).sum();
        let mean = sum / n as f64;

        if depth >= self.max_depth || n < 2 * self.min_leaf {
            return self.leaf(mean, n);
        }
        let Some(split) = self.best_split(&rows, sum) else {
            return self.leaf(mean, n);
        };

        self.gains[split.feature] += split.gain;
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

    fn leaf(&self, mean: f64, n: usize) -> TreeNode {
        TreeNode::Leaf {
            value: mean,
            n_samples: n,
            n_treated: 0,
            n_control: 0,
        }
    }

    /// Best (feature, threshold) by variance reduction, or None when no
    /// candidate leaves `min_leaf` rows in both children or no gain exists.
    fn best_split(&mut self, rows: &[usize], total_sum: f64) -> Option<Split> {
        let n = rows.len();
        let features = sample_indices(&mut self.rng, self.n_features, self.n_cand);
        let mut best: Option<Split> = None;

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
            let mut prefix = Vec::with_capacity(n + 1);
            prefix.push(0.0);
            let mut acc = 0.0;
            for &i in &ord {
                acc += self.y[i];
                prefix.push(acc);
            }

            for &b in &boundaries {
                let (nl, nr) = (b, n - b);
                if nl < self.min_leaf || nr < self.min_leaf {
                    continue;
                }
                let sum_l = prefix[b];
                let sum_r = total_sum - sum_l;
                // n_parent*var_parent - sum of n_child*var_child, with the
                // sum-of-squares terms cancelled.
                let gain = sum_l * sum_l / nl as f64 + sum_r * sum_r / nr as f64
                    - total_sum * total_sum / n as f64;
                if gain > 1e-12 && best.as_ref().is_none_or(|s| gain > s.gain) {
                    best = Some(Split {
                        feature: f,
                        threshold: midpoint(values[b - 1], values[b]),
                        gain,
                    });
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use rand::Rng;

    fn cfg(n_trees: usize, depth: usize) -> ForestConfig {
        ForestConfig {
            n_trees,
            max_depth: depth,
            subsample_fraction: 1.0,
            ..ForestConfig::regression_default()
        }
    }

    #[test]
    fn constant_target_predicts_constant() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let y = vec![3.0; 20];
        let forest = RegressionForest::fit(&x, &y, &cfg(10, 4)).unwrap();
        for row in &x {
            assert!((forest.predict(row) - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_sample_predicts_it() {
        let forest = RegressionForest::fit(&[vec![0.3, 0.4]], &[7.5], &cfg(5, 3)).unwrap();
        assert!((forest.predict(&[0.0, 0.0]) - 7.5).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let err = RegressionForest::fit(&[vec![1.0], vec![2.0]], &[1.0], &cfg(1, 2));
        assert!(matches!(err, Err(Error::Validation(_))));
        let ragged = RegressionForest::fit(&[vec![1.0], vec![2.0, 3.0]], &[1.0, 2.0], &cfg(1, 2));
        assert!(matches!(ragged, Err(Error::Validation(_))));
    }

    #[test]
    fn zero_split_forest_has_zero_importance() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y = vec![1.0; 10];
        let forest = RegressionForest::fit(&x, &y, &cfg(5, 4)).unwrap();
        assert_eq!(forest.feature_importance(), vec![0.0]);
    }

    #[test]
    fn single_split_concentrates_importance() {
        // Only feature 3 carries signal and depth 1 allows one split.
        let mut r = seeding::rng(1);
        let x: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..5).map(|_| r.random::<f64>()).collect())
            .collect();
        let y: Vec<f64> = x.iter().map(|row| if row[3] > 0.5 { 1.0 } else { 0.0 }).collect();
        let mut c = cfg(20, 1);
        c.n_candidate_features = 5;
        let forest = RegressionForest::fit(&x, &y, &c).unwrap();
        let imp = forest.feature_importance();
        assert!((imp[3] - 1.0).abs() < 1e-12, "importance {imp:?}");
    }

    #[test]
    fn importance_mass_lands_on_informative_features() {
        let mut r = seeding::rng(2);
        let x: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..6).map(|_| r.random::<f64>()).collect())
            .collect();
        let y: Vec<f64> = x.iter().map(|row| 2.0 * row[0] + row[1]).collect();
        let forest = RegressionForest::fit(&x, &y, &cfg(50, 6)).unwrap();
        let imp = forest.feature_importance();
        assert!(imp[0] + imp[1] >= 0.8, "importance {imp:?}");
    }

    #[test]
    fn leaf_values_are_means_of_routed_targets() {
        let mut r = seeding::rng(5);
        let x: Vec<Vec<f64>> = (0..60)
            .map(|_| vec![r.random::<f64>(), r.random::<f64>()])
            .collect();
        let y: Vec<f64> = x.iter().map(|row| row[0] * 3.0 + row[1]).collect();
        let mut c = cfg(1, 3);
        c.min_leaf = 2;
        let forest = RegressionForest::fit(&x, &y, &c).unwrap();

        // Route every training row through the single tree and recompute
        // leaf means independently.
        use std::collections::HashMap;
        let tree = &forest.trees()[0];
        let mut routed: HashMap<usize, (f64, usize, Vec<f64>)> = HashMap::new();
        for (row, target) in x.iter().zip(&y) {
            let leaf = tree.leaf_for(row);
            if let TreeNode::Leaf { value, n_samples, .. } = leaf {
                let key = leaf as *const TreeNode as usize;
                routed
                    .entry(key)
                    .or_insert((*value, *n_samples, Vec::new()))
                    .2
                    .push(*target);
            }
        }
        assert!(routed.len() > 1, "tree should have split");
        for (_, (value, n_samples, targets)) in routed {
            assert_eq!(n_samples, targets.len());
            let mean = targets.iter().sum::<f64>() / targets.len() as f64;
            assert!((value - mean).abs() < 1e-9);
        }
    }
}
