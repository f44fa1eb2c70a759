use std::path::{Path, PathBuf};

use eac_core::Error as CoreError;
use thiserror::Error;

/// Failures of the command line, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error in {}: {reason}", path.display())]
    Data { path: PathBuf, reason: String },

    #[error("data error: {0}")]
    Input(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn data(path: &Path, reason: impl ToString) -> Self {
        CliError::Data { path: path.to_path_buf(), reason: reason.to_string() }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// 1 config, 2 data or io, 3 numerical.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data { .. } | CliError::Input(_) | CliError::Io { .. } => 2,
            CliError::Numerical(_) => 3,
        }
    }

    /// Attaches a file to a core error raised while reading it.
    pub fn in_file(path: &Path, e: CoreError) -> Self {
        match CliError::from(e) {
            CliError::Input(reason) => CliError::data(path, reason),
            other => other,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Config(_) => CliError::Config(msg),
            CoreError::NonFinite { .. }
            | CoreError::NoConvergence { .. }
            | CoreError::Diverged { .. }
            | CoreError::NotDifferentiable(_)
            | CoreError::RecordConsumed
            | CoreError::NonScalarLoss(_)
            | CoreError::FrozenGradient(_)
            | CoreError::MissingGradient(_)
            | CoreError::UnknownParameter(_) => CliError::Numerical(msg),
            _ => CliError::Input(msg),
        }
    }
}
