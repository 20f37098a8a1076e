use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// Bad command line or argument combination.
    #[error("usage: {0}")]
    Usage(String),
    /// A check the run performs on itself did not hold.
    #[error("invariant failed: {0}")]
    Invariant(String),
    #[error(transparent)]
    Core(#[from] semvlp_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// 1 for usage errors, 2 for everything the run rejected or failed.
    pub fn exit_code(&self) -> ExitCode {
        match self {
            HarnessError::Usage(_) => ExitCode::from(1),
            _ => ExitCode::from(2),
        }
    }
}
