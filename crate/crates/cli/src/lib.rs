//! Command-line front end: run configuration, checkpoint files and the
//! subcommands of the `fusioninn` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod rawfile;

use fusioninn::data::DataError;
use fusioninn::flow::FlowError;
use fusioninn::metrics::MetricError;
use fusioninn::trainer::TrainError;
use fusioninn::TensorError;

/// Failures mapped onto the process exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or configuration.
    #[error("{0}")]
    Usage(String),
    /// Missing, unreadable or mismatched input files.
    #[error("{0}")]
    Input(String),
    /// Divergence, non-finite values or a failed numerical check.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::Config(_) => CliError::Usage(e.to_string()),
            FlowError::Divisibility { .. } => CliError::Input(e.to_string()),
            FlowError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            FlowError::Tensor(t) => t.into(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::EmptyValidation => CliError::Input(e.to_string()),
            TrainError::Flow(f) => f.into(),
            TrainError::Tensor(t) => t.into(),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            MetricError::Tensor(t) => t.into(),
            MetricError::TooSmall { .. } => CliError::Input(e.to_string()),
        }
    }
}
