use thiserror::Error;

use crate::tensor::TensorError;

/// Pipeline failures. Each maps to a stable code and a distinct exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    MissingArtifact(String),
    #[error("{0}")]
    OutputExists(String),
    #[error("{0}")]
    CorruptArtifact(String),
    #[error("{0}")]
    Compute(#[from] phaseuq::Error),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Config(_) => "CONFIG_INVALID",
            CliError::MissingArtifact(_) => "MISSING_ARTIFACT",
            CliError::OutputExists(_) => "OUTPUT_EXISTS",
            CliError::CorruptArtifact(_) => "CORRUPT_ARTIFACT",
            CliError::Compute(e) => e.code(),
            CliError::Io(_) => "IO_ERROR",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::OutputExists(_) => 4,
            CliError::CorruptArtifact(_) => 5,
            CliError::Compute(_) => 6,
            CliError::Io(_) => 7,
        }
    }

    /// `error[CODE]: message` on one line.
    pub fn render(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {}", self.code(), msg)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Io(m) => CliError::Io(m),
            other => CliError::CorruptArtifact(other.to_string()),
        }
    }
}
