//! Evaluation backends for allocations.

mod command;
mod insights;
mod presets;
mod synthetic;
mod table;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::searchspace::{Allocation, PipelineSpec, SpaceError};

pub use command::CommandEnv;
pub use insights::{verify_insights, CheckOutcome, InsightReport};
pub use presets::{make_preset, PRESET_NAMES};
pub use synthetic::{grid_truth, CurveParams, GridTruth, SyntheticEnv, DEFAULT_GRID_CAP};
pub use table::TableEnv;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("no table entry for allocation `{0}`")]
    MissingKey(String),
    #[error("command exited with {status}: {stderr}")]
    CommandFailed { status: String, stderr: String },
    #[error("could not parse a numeric result from command output {0:?}")]
    Unparsable(String),
    #[error("command timed out after {0:?}")]
    Timeout(Duration),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("search space has {size} allocations, above the cap of {cap}")]
    TooLarge { size: u64, cap: u64 },
    #[error("unknown preset `{0}` (expected one of retrieval-qa, three-stage, flat)")]
    UnknownPreset(String),
    #[error("invalid curve parameters: {0}")]
    InvalidParams(String),
    #[error("invalid command template: {0}")]
    Template(String),
}

/// Train evaluations are noisy measurements on a small sample; Test
/// evaluations are the noiseless surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Test,
}

/// How per-stage qualities combine into the pipeline's main metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Quality of the last stage.
    #[default]
    Final,
    Product,
}

impl Aggregation {
    pub fn apply(&self, qualities: &[f64]) -> f64 {
        match self {
            Aggregation::Final => qualities.last().copied().unwrap_or(0.0),
            Aggregation::Product => qualities.iter().product(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_subtask_quality: Vec<f64>,
    pub main_metric: f64,
    pub budget_spent: f64,
}

pub trait Environment {
    fn spec(&self) -> &PipelineSpec;

    /// Scores one allocation. `repeat` counts earlier evaluations of the same
    /// allocation so that noisy backends can draw fresh, reproducible noise.
    fn evaluate(&self, alloc: &Allocation, mode: Mode, repeat: u64) -> Result<EvalResult, EnvError>;
}
