//! Desk-scale analyses: planted synthetic corpora, gate and alignment-weight
//! studies, ablation grids, head sweeps and the efficiency benchmark.
//!
//! Every CSV written here carries the config hash and seed of the run.

mod bench;
mod experiments;
mod stats;
mod synthetic;

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use bench::{efficiency_bench, BenchKind, BenchRow, BenchSpec, TrainBench};
pub use experiments::{
    ablation_grid, divisors, gamma_interval_analysis, gating_strategy_sweep, head_sweep, mi_strategy_sweep, mu_clustering, run_cell,
    AblationRow, Cell, GammaAnalysis, HeadSweepRow, MuAnalysis, StrategyRow,
};
pub use stats::{adjusted_rand_index, fit_line, kmeans, min_max_normalize, ClusterResult, RegressionFit, KMEANS_RESTARTS};
pub use synthetic::{
    expl_id, generate_synthetic, item_id, write_labels, AlignmentProfile, RhythmProfile, SyntheticCorpus, SyntheticSpec, UserTruth,
    DAY, HOUR,
};

use crate::dataset::DataError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { got: usize, needed: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("{0}")]
    Precondition(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl AnalysisError {
    pub fn is_numeric(&self) -> bool {
        matches!(self, AnalysisError::Model(e) if e.is_numeric())
    }
}

/// SHA-256 of the JSON form of `value`, hex encoded.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("value serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), AnalysisError> {
    std::fs::write(path, contents).map_err(|source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    })
}
