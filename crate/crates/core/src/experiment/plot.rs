//! Figure-data files derived from a finished run's output directory.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Which figure-data file to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// Estimation RMSE faceted by condition and relevance stratum.
    RmseByCondition,
    /// Per-run nDCG@10 samples for box plots.
    NdcgBox,
    /// Per-document observed / corrected / true-model / IPS-weighted click
    /// rates with false-negative and false-positive strata.
    CtrDistributions,
}

impl PlotKind {
    pub fn parse(s: &str) -> Result<PlotKind> {
        match s {
            "rmse_by_condition" => Ok(PlotKind::RmseByCondition),
            "ndcg_box" => Ok(PlotKind::NdcgBox),
            "ctr_distributions" => Ok(PlotKind::CtrDistributions),
            other => Err(Error::Validation(format!(
                "unknown plot kind `{other}` (expected rmse_by_condition, ndcg_box, or ctr_distributions)"
            ))),
        }
    }
}

struct ResultRow {
    method: String,
    avg_searches: String,
    pct_queries: String,
    run: String,
    rmse: String,
    rmse_r0: String,
    rmse_r1: String,
    ndcg10: String,
}

fn read_results(dir: &Path) -> Result<Vec<ResultRow>> {
    let path = dir.join("results.csv");
    let file = std::fs::File::open(&path)
        .map_err(|_| Error::Validation(format!("no results.csv in {}; run `run` first", dir.display())))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty results.csv".into()))??;
    if header != "method,avg_searches,pct_queries,run,rmse,rmse_r0,rmse_r1,ndcg10,wallclock_s" {
        return Err(Error::Format("unexpected results.csv header".into()));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Parse {
                line: lineno + 2,
                msg: format!("expected 9 fields, got {}", f.len()),
            });
        }
        rows.push(ResultRow {
            method: f[0].into(),
            avg_searches: f[1].into(),
            pct_queries: f[2].into(),
            run: f[3].into(),
            rmse: f[4].into(),
            rmse_r0: f[5].into(),
            rmse_r1: f[6].into(),
            ndcg10: f[7].into(),
        });
    }
    Ok(rows)
}

/// Write one figure-data file into `dir` and return its path.
pub fn emit_plot_data(dir: &Path, kind: PlotKind) -> Result<PathBuf> {
    match kind {
        PlotKind::RmseByCondition => {
            let rows = read_results(dir)?;
            let path = dir.join("rmse_by_condition.csv");
            let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
            writeln!(w, "method,avg_searches,pct_queries,run,stratum,rmse")?;
            for r in &rows {
                for (stratum, value) in [("all", &r.rmse), ("r0", &r.rmse_r0), ("r1", &r.rmse_r1)] {
                    writeln!(
                        w,
                        "{},{},{},{},{stratum},{value}",
                        r.method, r.avg_searches, r.pct_queries, r.run
                    )?;
                }
            }
            Ok(path)
        }
        PlotKind::NdcgBox => {
            let rows = read_results(dir)?;
            let path = dir.join("ndcg_box.csv");
            let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
            writeln!(w, "method,avg_searches,pct_queries,run,ndcg10")?;
            for r in &rows {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    r.method, r.avg_searches, r.pct_queries, r.run, r.ndcg10
                )?;
            }
            Ok(path)
        }
        PlotKind::CtrDistributions => {
            let dump = dir.join("ctr_dump.csv");
            if !dump.exists() {
                return Err(Error::Validation(
                    "no ctr_dump.csv in the output directory; rerun `run` with dump_ctr = true (--dump-ctr)"
                        .into(),
                ));
            }
            let path = dir.join("ctr_distributions.csv");
            std::fs::copy(&dump, &path)?;
            Ok(path)
        }
    }
}
