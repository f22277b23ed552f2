//! Experiment driver: batch runs with resume, evaluation, ablations,
//! comparison tables and per-sample inspection.

mod ablate;
mod casestudy;
mod config;
mod evaluate;
mod experiment;
mod report;

use thiserror::Error;

pub use ablate::{ablate, ablate_with, AblationOutcome, VariantOutcome};
pub use casestudy::{casestudy, casestudy_with};
pub use config::{ConfigError, ExperimentConfig, Predictor, SetError};
pub use evaluate::{evaluate, Evaluation};
pub use experiment::{
    effective_config, load_dataset, make_backend, no_network, run_experiment, run_prepared, select_samples,
    RecordDiagnostics, RunOptions, RunSummary, SampleRecord, Timing,
};
pub use report::{render_report, ReportTables, REPORT_COLUMNS};

use crate::gateway::GatewayError;
use crate::ingest::IngestError;
use crate::metrics::MetricsError;
use crate::prompt::PromptError;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("ingest: {0}")]
    Ingest(#[from] IngestError),
    #[error("prompt: {0}")]
    Prompt(#[from] PromptError),
    #[error("backend: {0}")]
    Gateway(#[from] GatewayError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("results mismatch: {0}")]
    ResultsMismatch(String),
    #[error("no completion backend for a prompt-based predictor")]
    MissingBackend,
    #[error("{0}")]
    NotFound(String),
}
