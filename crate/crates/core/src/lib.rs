//! Counterfactual learning-to-rank experimentation toolkit.
//!
//! The crate simulates position-biased click logs over a ranking corpus,
//! estimates position bias with three estimators (a contextual position-based
//! propensity model, causal forests, and an X-learner), debiases training
//! clicks by click-distribution correction and resampling (or inverse
//! propensity weighting), trains linear pairwise rankers on the result, and
//! evaluates estimation accuracy and ranking quality across a grid of
//! data-sparsity conditions.
//!
//! Module map:
//!
//! * [`corpus`] — LETOR parsing, normalization, splits, context-feature
//!   selection, synthetic corpus generation.
//! * [`forest`] — regression and causal decision-tree ensembles.
//! * [`clicksim`] — query sampling, swap interventions, noisy click model.
//! * [`cpbm`] — contextual position-based propensity model (joint
//!   examination/relevance networks trained by backpropagation).
//! * [`hte`] — per-position treatment-effect datasets and estimator banks.
//! * [`debias`] — click correction + resampling, IPS weights, training lists.
//! * [`ltr`] — linear pairwise ranker with weighted hinge loss.
//! * [`eval`] — true-effect oracle, RMSE, nDCG@10, Welch t-test.
//! * [`experiment`] — the condition-grid runner behind the CLI.

pub mod clicksim;
pub mod corpus;
pub mod cpbm;
pub mod debias;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod forest;
pub mod hte;
pub mod ltr;
pub mod seeding;

pub use clicksim::{ClickModelParams, ImpressionRecord};
pub use corpus::{CorpusSplit, Document, QueryGroup};
pub use error::{Error, Result};
pub use forest::{CausalForest, ForestConfig, RegressionForest, TreeNode};
pub use hte::{HteDataset, TauEstimatorBank, TauSource};
pub use ltr::LinearRankModel;
