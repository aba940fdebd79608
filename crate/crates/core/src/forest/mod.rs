//! Decision-tree ensembles.
//!
//! One shared tree representation backs two forests:
//!
//! * [`RegressionForest`] — CART variance-reduction trees; used for feature
//!   importance and as the X-learner base model.
//! * [`CausalForest`] — trees that estimate a treatment effect in each leaf
//!   as the difference of arm means, split to maximize effect heterogeneity
//!   between children, optionally with honest build/estimate subsamples.
//!
//! Tree fitting is independent per tree; per-tree RNG streams are derived
//! from `(seed, tree_index)` so parallel and serial runs agree bit-for-bit.

mod causal;
mod regression;

pub use causal::CausalForest;
pub use regression::RegressionForest;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cap on candidate thresholds per feature per node; beyond this the
/// midpoints are thinned to evenly spaced quantiles.
pub(crate) const THRESHOLD_CAP: usize = 64;

/// Hyperparameters shared by both forest kinds.
///
/// `min_leaf` governs regression trees, `min_leaf_per_arm` causal trees;
/// `honest` is only meaningful for causal trees. Fields omitted from a
/// config file fall back to the causal defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub min_leaf_per_arm: usize,
    pub subsample_fraction: f64,
    /// Number of random candidate features per split; 0 means
    /// `ceil(sqrt(n_features))`.
    pub n_candidate_features: usize,
    pub honest: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig::causal_default()
    }
}

impl ForestConfig {
    /// Defaults for regression forests (importance selection, X-learner base).
    pub fn regression_default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: 8,
            min_leaf: 5,
            min_leaf_per_arm: 1,
            subsample_fraction: 0.8,
            n_candidate_features: 0,
            honest: false,
            seed: 0,
        }
    }

    /// Defaults for causal forests.
    pub fn causal_default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: 12,
            min_leaf: 1,
            min_leaf_per_arm: 5,
            subsample_fraction: 0.5,
            n_candidate_features: 0,
            honest: true,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Validation("n_trees must be >= 1".into()));
        }
        if self.min_leaf == 0 || self.min_leaf_per_arm == 0 {
            return Err(Error::Validation("min leaf sizes must be >= 1".into()));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::Validation(format!(
                "subsample_fraction must lie in (0, 1], got {}",
                self.subsample_fraction
            )));
        }
        Ok(())
    }

    pub(crate) fn resolved_candidate_features(&self, n_features: usize) -> usize {
        let k = if self.n_candidate_features == 0 {
            (n_features as f64).sqrt().ceil() as usize
        } else {
            self.n_candidate_features
        };
        k.clamp(1, n_features.max(1))
    }
}

/// One tree node. Internal nodes route `x` left iff
/// `x[feature_index] <= threshold`.
///
/// For causal trees the leaf `value` is the difference of arm means computed
/// on the estimation sample and `n_samples == n_treated + n_control`; for
/// regression trees the arm counts stay 0 and `value` is the target mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TreeNode {
    Internal {
        feature_index: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        value: f64,
        n_samples: usize,
        n_treated: usize,
        n_control: usize,
    },
}

impl TreeNode {
    /// Follow the routing rule down to the leaf containing `x`.
    pub fn leaf_for(&self, x: &[f64]) -> &TreeNode {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { .. } => return node,
                TreeNode::Internal {
                    feature_index,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature_index] <= *threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    pub(crate) fn empty_leaf() -> TreeNode {
        TreeNode::Leaf {
            value: 0.0,
            n_samples: 0,
            n_treated: 0,
            n_control: 0,
        }
    }
}

pub(crate) fn validate_matrix(x: &[Vec<f64>]) -> Result<usize> {
    let Some(first) = x.first() else {
        return Err(Error::Validation("no rows".into()));
    };
    let d = first.len();
    if d == 0 {
        return Err(Error::Validation("rows have zero features".into()));
    }
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Validation("ragged feature matrix".into()));
    }
    Ok(d)
}

/// Split boundaries for one feature at one node.
///
/// `ord` is the node's row set sorted by the feature value. A boundary `i`
/// means "left = first i sorted rows" and is admissible only between two
/// distinct values; the returned list is thinned to at most
/// [`THRESHOLD_CAP`] evenly spaced entries (quantiles of the unique values).
pub(crate) fn candidate_boundaries(values: &[f64]) -> Vec<usize> {
    let n = values.len();
    let boundaries: Vec<usize> = (1..n).filter(|&i| values[i - 1] < values[i]).collect();
    if boundaries.len() <= THRESHOLD_CAP {
        return boundaries;
    }
    let m = boundaries.len();
    let mut picked = Vec::with_capacity(THRESHOLD_CAP);
    for j in 0..THRESHOLD_CAP {
        let idx = j * (m - 1) / (THRESHOLD_CAP - 1);
        picked.push(boundaries[idx]);
    }
    picked.dedup();
    picked
}

pub(crate) fn midpoint(a: f64, b: f64) -> f64 {
    0.5 * (a + b)
}
