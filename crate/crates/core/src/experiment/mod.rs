//! Experiment orchestration: the condition grid behind the CLI.
//!
//! A grid cell is one (avg searches/query, pct training queries, run)
//! triple. Each cell loads or generates its corpus, selects context
//! features, trains the production ranker, simulates intervention clicks,
//! fits the configured estimators, builds the debiased ranker variants, and
//! evaluates estimation RMSE and nDCG@10 on the test split. Every
//! stochastic component's seed derives from
//! `(base_seed, condition index, run index, component name)`.

mod artifacts;
mod plot;
mod runner;

pub use artifacts::{load_model, save_model, SimManifest, BANK_FORMAT, CPBM_FORMAT};
pub use plot::{emit_plot_data, PlotKind};
pub use runner::{load_or_generate_corpus, run_cell, run_experiment, CellOutcome, CtrRow, RunArtifacts};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::ForestConfig;
use crate::ltr::LtrConfig;

/// The four ranker variants the grid can compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "cpbm_ltr")]
    CpbmLtr,
    #[serde(rename = "cpbm_clipped_ips_ltr")]
    CpbmClippedIpsLtr,
    #[serde(rename = "causal_forest_ltr")]
    CausalForestLtr,
    #[serde(rename = "x_learner_ltr")]
    XLearnerLtr,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::CpbmLtr,
        Method::CpbmClippedIpsLtr,
        Method::CausalForestLtr,
        Method::XLearnerLtr,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::CpbmLtr => "cpbm_ltr",
            Method::CpbmClippedIpsLtr => "cpbm_clipped_ips_ltr",
            Method::CausalForestLtr => "causal_forest_ltr",
            Method::XLearnerLtr => "x_learner_ltr",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown method `{s}` (expected one of {})",
                    Method::ALL.map(|m| m.name()).join(", ")
                ))
            })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the ranking corpus comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// `synthetic` or `letor`.
    pub source: String,
    pub n_queries: usize,
    pub docs_per_query: usize,
    pub feature_dim: usize,
    /// Directory holding `train.txt`, `vali.txt`, `test.txt`.
    pub letor_dir: Option<PathBuf>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            source: "synthetic".into(),
            n_queries: 300,
            docs_per_query: 15,
            feature_dim: 20,
            letor_dir: None,
        }
    }
}

/// The condition grid and seeding.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub avg_searches_per_query: Vec<f64>,
    pub pct_training_queries: Vec<f64>,
    pub methods: Vec<Method>,
    pub n_runs: usize,
    pub base_seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            avg_searches_per_query: vec![5.0, 25.0],
            pct_training_queries: vec![0.1, 1.0],
            methods: Method::ALL.to_vec(),
            n_runs: 3,
            base_seed: 42,
        }
    }
}

/// Click-model settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClickConfig {
    pub k_max: usize,
    pub noise_click_prob: f64,
    pub n_context_features: usize,
}

impl Default for ClickConfig {
    fn default() -> Self {
        ClickConfig {
            k_max: 10,
            noise_click_prob: 0.1,
            n_context_features: 10,
        }
    }
}

/// Everything a run needs. All module hyperparameters live here so a single
/// TOML file reproduces a run exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub grid: GridConfig,
    pub click: ClickConfig,
    /// Causal-forest settings (the per-position effect estimators).
    pub forest: ForestConfig,
    /// Regression-forest base settings for the X-learner.
    pub xl_base: ForestConfig,
    /// Fixed X-learner blend weight; unset uses the treated fraction.
    pub xl_g: Option<f64>,
    pub cpbm: crate::cpbm::CpbmConfig,
    pub ltr: LtrConfig,
    /// Fraction of train+validation queries for the production ranker.
    pub production_fraction: f64,
    /// Propensity clip range for the clipped-IPS variant.
    pub ips_clip_lo: f64,
    pub ips_clip_hi: f64,
    /// Train the debiased rankers on all arms instead of the control arm.
    pub ltr_all_arms: bool,
    /// Write the per-document click-rate dump needed by
    /// `plot-data --kind ctr_distributions`.
    pub dump_ctr: bool,
    /// Record real wall-clock seconds per row. Off by default so that two
    /// runs of the same config produce byte-identical CSVs.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusConfig::default(),
            grid: GridConfig::default(),
            click: ClickConfig::default(),
            forest: ForestConfig::causal_default(),
            xl_base: ForestConfig::regression_default(),
            xl_g: None,
            cpbm: crate::cpbm::CpbmConfig::default(),
            ltr: LtrConfig::default(),
            production_fraction: 0.01,
            ips_clip_lo: 0.01,
            ips_clip_hi: 1.0,
            ltr_all_arms: false,
            dump_ctr: false,
            timing: false,
        }
    }
}

impl ExperimentConfig {
    /// The paper-shaped preset: 4 x 4 conditions, 3 runs.
    pub fn paper_grid(mut self) -> Self {
        self.grid.avg_searches_per_query = vec![5.0, 10.0, 25.0, 50.0];
        self.grid.pct_training_queries = vec![0.01, 0.10, 0.50, 1.00];
        self.grid.n_runs = 3;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.avg_searches_per_query.is_empty() || self.grid.pct_training_queries.is_empty() {
            return Err(Error::Validation("condition grids must be non-empty".into()));
        }
        if self.grid.methods.is_empty() {
            return Err(Error::Validation("at least one method is required".into()));
        }
        if self.grid.n_runs == 0 {
            return Err(Error::Validation("n_runs must be >= 1".into()));
        }
        if self.click.k_max < 2 {
            return Err(Error::Validation("k_max must be >= 2".into()));
        }
        if self.cpbm.k_max != self.click.k_max {
            return Err(Error::Validation(format!(
                "cpbm.k_max {} must equal click.k_max {}",
                self.cpbm.k_max, self.click.k_max
            )));
        }
        match self.corpus.source.as_str() {
            "synthetic" => {}
            "letor" => {
                if self.corpus.letor_dir.is_none() {
                    return Err(Error::Validation("letor source needs corpus.letor_dir".into()));
                }
            }
            other => {
                return Err(Error::Validation(format!(
                    "unknown corpus source `{other}` (expected `synthetic` or `letor`)"
                )))
            }
        }
        Ok(())
    }

    /// Conditions in grid order: avg-searches outer, pct inner.
    pub fn conditions(&self) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        let mut idx = 0;
        for &avg in &self.grid.avg_searches_per_query {
            for &pct in &self.grid.pct_training_queries {
                out.push((idx, avg, pct));
                idx += 1;
            }
        }
        out
    }
}
