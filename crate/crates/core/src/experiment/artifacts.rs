//! Versioned model files and the simulation manifest.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::clicksim::ClickModelParams;
use crate::error::{Error, Result};
use crate::ltr::LinearRankModel;

use super::CorpusConfig;

pub const BANK_FORMAT: &str = "cltr-bank";
pub const CPBM_FORMAT: &str = "cltr-cpbm";
pub const MANIFEST_FORMAT: &str = "cltr-sim-manifest";

const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    format: String,
    version: u32,
    model: T,
}

/// Write a model as versioned JSON.
pub fn save_model<T: Serialize>(format: &str, model: &T, path: &Path) -> Result<()> {
    let wrapper = Versioned {
        format: format.to_string(),
        version: VERSION,
        model,
    };
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(file, &wrapper)?;
    Ok(())
}

/// Read a model written by [`save_model`], checking format and version.
pub fn load_model<T: DeserializeOwned>(format: &str, path: &Path) -> Result<T> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let wrapper: Versioned<T> = serde_json::from_reader(file)?;
    if wrapper.format != format {
        return Err(Error::Format(format!(
            "expected a `{format}` file, found `{}`",
            wrapper.format
        )));
    }
    if wrapper.version != VERSION {
        return Err(Error::Format(format!(
            "unsupported {format} version {}",
            wrapper.version
        )));
    }
    Ok(wrapper.model)
}

/// Everything needed to reproduce a `simulate` invocation and evaluate
/// models against it later.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimManifest {
    pub corpus: CorpusConfig,
    pub corpus_seed: u64,
    pub context_indices: Vec<usize>,
    pub click_params: ClickModelParams,
    pub ranker: LinearRankModel,
    pub avg_searches_per_query: f64,
    pub pct_training_queries: f64,
    pub seed: u64,
}

impl SimManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_model(MANIFEST_FORMAT, self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_model(MANIFEST_FORMAT, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn versioned_round_trip_checks_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model("cltr-test", &vec![1.0f64, 2.0], &path).unwrap();
        let back: Vec<f64> = load_model("cltr-test", &path).unwrap();
        assert_eq!(back, vec![1.0, 2.0]);
        let err: Result<Vec<f64>> = load_model("cltr-other", &path);
        assert!(matches!(err, Err(Error::Format(_))));
    }
}
