//! Contextual position-based propensity model (CPBM).
//!
//! Two jointly trained networks: an examination net mapping a context
//! vector to per-position examination probabilities in `(0, 1)^K`, and a
//! relevance net mapping the context to a `K x K` matrix of intervention-set
//! relevance values, symmetrized as the arithmetic mean of the raw output
//! and its transpose. Both are fit by minimizing the product cross-entropy
//! over intervention-set click rates with analytically derived gradients.

mod net;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::clicksim::ImpressionRecord;
use crate::error::{Error, Result};
use crate::hte::TauSource;
use crate::seeding::{self, mix_tag};
use net::{Mlp, MlpBuffer, MlpGrads};

/// Log arguments are clipped to `[CLIP, 1 - CLIP]` inside the loss.
const CLIP: f64 = 1e-6;

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CpbmConfig {
    pub hidden1: usize,
    pub hidden2: usize,
    pub lr: f64,
    /// Epoch scale of the harmonic learning-rate decay
    /// `lr / (1 + epoch / lr_decay_epochs)`; 0 keeps the rate flat.
    pub lr_decay_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub k_max: usize,
    pub seed: u64,
}

impl Default for CpbmConfig {
    fn default() -> Self {
        CpbmConfig {
            hidden1: 32,
            hidden2: 16,
            lr: 0.05,
            lr_decay_epochs: 0,
            epochs: 200,
            batch_size: 256,
            k_max: 10,
            seed: 0,
        }
    }
}

/// One intervention-set row: a unique (query, document) pair observed at
/// two or more positions, with its per-position click rates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterventionRow {
    pub context: Vec<f64>,
    /// Distinct observed positions, ascending.
    pub positions: Vec<usize>,
    /// Click rate per observed position, keyed in ascending position order.
    pub click_rate_at: Vec<(usize, f64)>,
    /// The two most frequently observed positions (ties broken toward the
    /// lower position); indexes the relevance entry this row trains.
    pub intervention_pair: (usize, usize),
}

/// Dataset of intervention-set rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterventionSetDataset {
    pub rows: Vec<InterventionRow>,
    pub context_dim: usize,
    pub k_max: usize,
}

/// Group an impression log (clicks merged from all arms) into
/// intervention-set rows, keeping only (query, document) pairs observed at
/// at least two distinct positions.
pub fn build_cpbm_dataset(log: &[ImpressionRecord], k_max: usize) -> Result<InterventionSetDataset> {
    if log.is_empty() {
        return Err(Error::EmptyDataset("impression log is empty".into()));
    }
    let context_dim = log[0].context.len();

    struct Entry {
        context: Vec<f64>,
        // per position: (impressions, clicks)
        counts: HashMap<usize, (usize, usize)>,
    }
    let mut order: Vec<(String, usize)> = Vec::new();
    let mut entries: HashMap<(String, usize), Entry> = HashMap::new();
    for rec in log {
        if rec.position == 0 || rec.position > k_max {
            return Err(Error::Validation(format!(
                "impression at position {} exceeds k_max {}",
                rec.position, k_max
            )));
        }
        let key = (rec.query_id.clone(), rec.doc_index);
        let entry = entries.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Entry {
                context: rec.context.clone(),
                counts: HashMap::new(),
            }
        });
        let slot = entry.counts.entry(rec.position).or_insert((0, 0));
        slot.0 += 1;
        slot.1 += usize::from(rec.clicked == 1);
    }

    let mut rows = Vec::new();
    for key in &order {
        let entry = &entries[key];
        if entry.counts.len() < 2 {
            continue;
        }
        let mut by_freq: Vec<(usize, usize)> = entry.counts.iter().map(|(&pos, &(n, _))| (pos, n)).collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let intervention_pair = (by_freq[0].0, by_freq[1].0);

        let mut positions: Vec<usize> = entry.counts.keys().copied().collect();
        positions.sort_unstable();
        let click_rate_at: Vec<(usize, f64)> = positions
            .iter()
            .map(|&pos| {
                let (n, c) = entry.counts[&pos];
                (pos, c as f64 / n as f64)
            })
            .collect();
        rows.push(InterventionRow {
            context: entry.context.clone(),
            positions,
            click_rate_at,
            intervention_pair,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset(
            "no (query, document) pair was observed at two or more positions".into(),
        ));
    }
    Ok(InterventionSetDataset {
        rows,
        context_dim,
        k_max,
    })
}

/// The fitted examination and relevance networks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CpbmNetworks {
    exam: Mlp,
    rel: Mlp,
    pub k_max: usize,
    pub context_dim: usize,
}

impl CpbmNetworks {
    /// Fresh networks with deterministic initialization.
    pub fn init(context_dim: usize, cfg: &CpbmConfig) -> Self {
        let mut exam_rng = seeding::rng(mix_tag(cfg.seed, "exam-init"));
        let mut rel_rng = seeding::rng(mix_tag(cfg.seed, "rel-init"));
        CpbmNetworks {
            exam: Mlp::init(context_dim, cfg.hidden1, cfg.hidden2, cfg.k_max, &mut exam_rng),
            rel: Mlp::init(
                context_dim,
                cfg.hidden1,
                cfg.hidden2,
                cfg.k_max * cfg.k_max,
                &mut rel_rng,
            ),
            k_max: cfg.k_max,
            context_dim,
        }
    }

    /// Examination probabilities for all positions, each in `(0, 1)`.
    pub fn exam_probs(&self, x: &[f64]) -> Vec<f64> {
        let mut buf = self.exam.buffer();
        self.exam.forward(x, &mut buf);
        buf.out
    }

    /// The symmetrized `K x K` relevance matrix (row-major).
    ///
    /// Symmetry is exact by construction: entry `(i, j)` and entry `(j, i)`
    /// are both the arithmetic mean of the same two raw outputs.
    pub fn relevance_matrix(&self, x: &[f64]) -> Vec<f64> {
        let mut buf = self.rel.buffer();
        self.rel.forward(x, &mut buf);
        let k = self.k_max;
        let mut sym = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                sym[i * k + j] = 0.5 * (buf.out[i * k + j] + buf.out[j * k + i]);
            }
        }
        sym
    }

    /// `f_p(x, k)`; errors when `k` is outside `{1..k_max}`.
    pub fn predict_propensity(&self, x: &[f64], k: usize) -> Result<f64> {
        if k == 0 || k > self.k_max {
            return Err(Error::Validation(format!(
                "position {k} outside 1..={}",
                self.k_max
            )));
        }
        Ok(self.exam_probs(x)[k - 1])
    }

    /// `tau_hat_k(x) = f_p(x,1) f_r(x,1,k) - f_p(x,k) f_r(x,k,1)`;
    /// by relevance symmetry this equals `f_r(x,1,k) (f_p(x,1) - f_p(x,k))`.
    /// Position 1 returns 0 by convention.
    pub fn tau(&self, x: &[f64], k: usize) -> f64 {
        debug_assert!(k >= 1 && k <= self.k_max);
        if k == 1 {
            return 0.0;
        }
        let e = self.exam_probs(x);
        let r = self.relevance_matrix(x);
        let r_1k = r[k - 1]; // row 0, column k-1
        let r_k1 = r[(k - 1) * self.k_max]; // row k-1, column 0
        tau_from(e[0], e[k - 1], r_1k, r_k1)
    }

    fn loss_grads(
        &self,
        data: &InterventionSetDataset,
        row_indices: &[usize],
        exam_grads: Option<&mut MlpGrads>,
        rel_grads: Option<&mut MlpGrads>,
        exam_buf: &mut MlpBuffer,
        rel_buf: &mut MlpBuffer,
    ) -> f64 {
        let k_total = self.k_max;
        let mut g_exam = vec![0.0; k_total];
        let mut g_rel = vec![0.0; k_total * k_total];
        let want_grads = exam_grads.is_some();
        let mut exam_grads = exam_grads;
        let mut rel_grads = rel_grads;
        let mut loss = 0.0;

        for &ri in row_indices {
            let row = &data.rows[ri];
            self.exam.forward(&row.context, exam_buf);
            self.rel.forward(&row.context, rel_buf);
            let (a, b) = row.intervention_pair;
            let (ia, ib) = (a - 1, b - 1);
            let r = 0.5 * (rel_buf.out[ia * k_total + ib] + rel_buf.out[ib * k_total + ia]);

            g_exam.fill(0.0);
            let mut g_r = 0.0;
            for &(pos, y) in &row.click_rate_at {
                let e = exam_buf.out[pos - 1];
                let q = e * r;
                let qc = q.clamp(CLIP, 1.0 - CLIP);
                loss -= y * qc.ln() + (1.0 - y) * (1.0 - qc).ln();
                if want_grads && q > CLIP && q < 1.0 - CLIP {
                    let dq = -y / qc + (1.0 - y) / (1.0 - qc);
                    g_exam[pos - 1] += dq * r;
                    g_r += dq * e;
                }
            }
            if want_grads {
                g_rel.fill(0.0);
                g_rel[ia * k_total + ib] += 0.5 * g_r;
                g_rel[ib * k_total + ia] += 0.5 * g_r;
                self.exam
                    .backward(&row.context, exam_buf, &g_exam, exam_grads.as_mut().unwrap());
                self.rel
                    .backward(&row.context, rel_buf, &g_rel, rel_grads.as_mut().unwrap());
            }
        }
        loss
    }

    /// Full-dataset loss (the training objective's sum form).
    pub fn loss(&self, data: &InterventionSetDataset) -> f64 {
        let all: Vec<usize> = (0..data.rows.len()).collect();
        let mut eb = self.exam.buffer();
        let mut rb = self.rel.buffer();
        self.loss_grads(data, &all, None, None, &mut eb, &mut rb)
    }

    /// Full-dataset loss and the gradient as one flat vector
    /// (examination-net parameters first, then relevance-net parameters).
    pub fn loss_and_grad(&self, data: &InterventionSetDataset) -> (f64, Vec<f64>) {
        let all: Vec<usize> = (0..data.rows.len()).collect();
        let mut eg = self.exam.zero_grads();
        let mut rg = self.rel.zero_grads();
        let mut eb = self.exam.buffer();
        let mut rb = self.rel.buffer();
        let loss = self.loss_grads(data, &all, Some(&mut eg), Some(&mut rg), &mut eb, &mut rb);
        let mut flat = Vec::with_capacity(self.param_count());
        for i in 0..self.exam.param_count() {
            flat.push(Mlp::grad_param(&eg, i, &self.exam));
        }
        for i in 0..self.rel.param_count() {
            flat.push(Mlp::grad_param(&rg, i, &self.rel));
        }
        (loss, flat)
    }

    pub fn param_count(&self) -> usize {
        self.exam.param_count() + self.rel.param_count()
    }

    pub fn get_param(&self, index: usize) -> f64 {
        let ne = self.exam.param_count();
        if index < ne {
            self.exam.get_param(index)
        } else {
            self.rel.get_param(index - ne)
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let ne = self.exam.param_count();
        if index < ne {
            self.exam.set_param(index, value);
        } else {
            self.rel.set_param(index - ne, value);
        }
    }
}

/// The CPBM treatment-effect expression on already-extracted entries:
/// `e1 * r_1k - ek * r_k1`.
pub fn tau_from(e1: f64, ek: f64, r_1k: f64, r_k1: f64) -> f64 {
    e1 * r_1k - ek * r_k1
}

impl TauSource for CpbmNetworks {
    fn tau_at(&self, _query_id: &str, _doc_index: usize, x: &[f64], k: usize) -> f64 {
        self.tau(x, k)
    }
}

/// Fit the networks by mini-batch gradient descent on the product
/// cross-entropy.
pub fn fit_cpbm(data: &InterventionSetDataset, cfg: &CpbmConfig) -> Result<CpbmNetworks> {
    if data.rows.is_empty() {
        return Err(Error::EmptyDataset("no intervention rows to fit".into()));
    }
    if data.k_max != cfg.k_max {
        return Err(Error::Validation(format!(
            "dataset k_max {} differs from config k_max {}",
            data.k_max, cfg.k_max
        )));
    }
    for row in &data.rows {
        if row.context.len() != data.context_dim {
            return Err(Error::Validation("ragged context vectors".into()));
        }
        let (a, b) = row.intervention_pair;
        if a == 0 || a > cfg.k_max || b == 0 || b > cfg.k_max {
            return Err(Error::Validation(format!(
                "intervention pair ({a}, {b}) outside 1..={}",
                cfg.k_max
            )));
        }
        if row.click_rate_at.iter().any(|&(p, y)| {
            p == 0 || p > cfg.k_max || !(0.0..=1.0).contains(&y)
        }) {
            return Err(Error::Validation("bad (position, click rate) entry".into()));
        }
    }

    let mut nets = CpbmNetworks::init(data.context_dim, cfg);
    let mut exam_buf = nets.exam.buffer();
    let mut rel_buf = nets.rel.buffer();
    let mut eg = nets.exam.zero_grads();
    let mut rg = nets.rel.zero_grads();
    let mut order: Vec<usize> = (0..data.rows.len()).collect();
    let mut shuffle_rng = seeding::rng(mix_tag(cfg.seed, "epoch-shuffle"));

    for epoch in 0..cfg.epochs {
        seeding::shuffle(&mut shuffle_rng, &mut order);
        let lr = if cfg.lr_decay_epochs == 0 {
            cfg.lr
        } else {
            cfg.lr / (1.0 + epoch as f64 / cfg.lr_decay_epochs as f64)
        };
        for batch in order.chunks(cfg.batch_size.max(1)) {
            eg.zero();
            rg.zero();
            nets.loss_grads(data, batch, Some(&mut eg), Some(&mut rg), &mut exam_buf, &mut rel_buf);
            let scale = lr / batch.len() as f64;
            nets.exam.apply(&eg, scale);
            nets.rel.apply(&rg, scale);
        }
        let loss = nets.loss(data);
        if !loss.is_finite() {
            return Err(Error::Training {
                epoch,
                msg: format!("non-finite loss {loss}"),
            });
        }
    }
    Ok(nets)
}
