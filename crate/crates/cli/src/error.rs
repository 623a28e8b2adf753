use std::path::PathBuf;

use comp_core::model::{CheckpointError, ModelError};
use comp_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid config: {message}")]
    Config { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// Stable process exit code.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            CliError::Io { .. } => 2,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

pub fn core_exit_code(e: &CoreError) -> i32 {
    match e {
        CoreError::Model(ModelError::Divergence { .. }) => 3,
        CoreError::Model(ModelError::Checkpoint(CheckpointError::Io { .. })) => 2,
        CoreError::Model(ModelError::Checkpoint(_)) => 4,
        CoreError::Model(ModelError::CorpusTooShort { .. }) => 2,
        CoreError::Model(_) | CoreError::DegenerateTrace(_) => 4,
        CoreError::Infeasible(_) | CoreError::Config(_) => 5,
        CoreError::Linalg(_) | CoreError::Solver { .. } => 6,
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Core(CoreError::Model(e))
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Core(CoreError::Model(ModelError::Checkpoint(e)))
    }
}
