use std::path::PathBuf;

use decorr_core::Error as CoreError;

/// Failure of a command, partitioned by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset unavailable: {0}")]
    MissingData(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingData(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io { .. } | CliError::Other(_) => 1,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            context: path.display().to_string(),
            source,
        }
    }

    /// Wraps a failure to read dataset files.
    pub(crate) fn data(root: &std::path::Path, e: CoreError) -> Self {
        CliError::MissingData(format!("{}: {e}", root.display()))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            CoreError::Config(msg) => CliError::Config(msg),
            CoreError::InvalidSpec(_)
            | CoreError::UnknownModel(_)
            | CoreError::UnknownStage { .. }
            | CoreError::DigestMismatch
            | CoreError::LabelOutOfRange { .. } => CliError::Config(e.to_string()),
            CoreError::Io(source) => CliError::Io {
                context: "i/o".into(),
                source,
            },
            other => CliError::Other(other.to_string()),
        }
    }
}

pub(crate) fn missing_files(files: &[PathBuf]) -> Option<CliError> {
    let missing: Vec<String> = files
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    (!missing.is_empty()).then(|| CliError::MissingData(format!("missing {}", missing.join(", "))))
}
