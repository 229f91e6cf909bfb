use std::path::Path;

use scenegen::closedloop::ClosedLoopError;
use scenegen::datagen::DatagenError;
use scenegen::denoiser::DenoiserError;
use scenegen::diffusion::{SampleError, TrainError};
use scenegen::metrics::MetricsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("data: {0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// Process exit status for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Io { .. } => 3,
            Self::Data(_) => 4,
            Self::Runtime(_) => 5,
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn json(path: &Path) -> impl FnOnce(serde_json::Error) -> Self + '_ {
        move |e| Self::Data(format!("{}: {e}", path.display()))
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::Io { path, source } => Self::Io { path, source },
            DatagenError::Json(_) => Self::Data(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(m) => Self::Data(m),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<DenoiserError> for CliError {
    fn from(e: DenoiserError) -> Self {
        Self::Data(format!("checkpoint: {e}"))
    }
}

impl From<SampleError> for CliError {
    fn from(e: SampleError) -> Self {
        match e {
            SampleError::Config(m) => Self::Config(m),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<ClosedLoopError> for CliError {
    fn from(e: ClosedLoopError) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        Self::Data(e.to_string())
    }
}
