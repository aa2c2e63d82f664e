//! Experiment specs, presets, multi-seed runs and post-hoc analysis.

mod analyze;
mod presets;
mod run;
mod spec;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::DataError;
use crate::metrics::MetricsError;
use crate::models::ModelError;
use crate::rescaler::RescalerError;
use crate::trainer::TrainError;

pub use analyze::{analyze, Analysis, ModeAnalysis};
pub use presets::{preset, preset_names, DATASETS, NOISE_LEVELS, VARIANTS};
pub use run::{
    aggregate, data_dir, find_logs, load_raw, output_dir, output_root, prepare_folds, reduce, run_experiment, run_fold,
    run_seed, Failure, Fold, FoldResult, FoldRun, ModeReport, PairedReport, Report, SeedResult, Summary, VERSION,
};
pub use spec::{mode_name, parse_pairs, DatasetKind, DatasetSpec, ExperimentSpec, MetricKind, SplitKind};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("invalid value {value:?} for {key}: expected {expected}")]
    Value { key: String, value: String, expected: String },
    #[error("unknown key: {0}")]
    UnknownKey(String),
    #[error("conflicting settings: {0}")]
    Conflict(String),
    #[error("unknown preset: {0}")]
    UnknownPreset(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Rescaler(#[from] RescalerError),
}

impl ExperimentError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
