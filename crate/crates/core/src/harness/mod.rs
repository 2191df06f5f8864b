//! Data I/O, synthetic data, training, metrics, cross-validation and grid
//! search.

mod cv;
mod data;
pub mod metrics;
mod synth;
mod train;

use thiserror::Error;

pub use cv::{
    cross_validate, grid_search, kfold, render_table, train_and_evaluate, GridCell, GridConfig, GridReport,
    GridRow, MetricsReport, RunConfig, RunOutcome, REPORT_SCHEMA_VERSION,
};
pub use data::{load_dataset, read_dataset, write_context, write_observations, LoadedData};
pub use metrics::{auprc, auprc_macro, mean_std, rmse, MetricError};
pub use synth::{gen_synthetic, SubjectTruth, SyntheticManifest, SyntheticSpec, MANIFEST_SCHEMA_VERSION};
pub use train::{
    dataset_loss, dims_of, evaluate, metric_value, train, train_model, EpochRecord, Evaluation, History,
    MetricKind, TrainConfig, HISTORY_SCHEMA_VERSION,
};

use crate::interp::InterpError;
use crate::models::ModelError;
use crate::preprocess::PreprocessError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("line {line}: {msg}")]
    Csv { line: u64, msg: String },
    #[error("csv: {0}")]
    CsvFormat(#[from] csv::Error),
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("line {line}: subject {id} has two rows at t = {t}")]
    DuplicateTime { id: String, t: f64, line: u64 },
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("cannot split {subjects} subjects into {folds} folds (need 2 <= folds <= subjects)")]
    Folds { subjects: usize, folds: usize },
    #[error("grid axis {0:?} is empty")]
    EmptyGrid(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
