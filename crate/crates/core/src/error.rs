use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GmsError> = std::result::Result<T, E>;

/// Every failure surfaced by the library.
///
/// The CLI maps [`GmsError::is_user_error`] variants to exit code 1 and the
/// rest to exit code 2.
#[derive(Debug, Error)]
pub enum GmsError {
    #[error("dimension error on {axis}: expected {expected}, got {actual}")]
    Dimension {
        axis: String,
        expected: String,
        actual: String,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("state error: {0}")]
    State(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported archive version {found} (max supported {supported})")]
    Version { found: u32, supported: u32 },
    #[error("corrupt archive: {0}")]
    Corruption(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GmsError {
    pub(crate) fn dim(
        axis: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        GmsError::Dimension {
            axis: axis.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GmsError::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad input or flags rather than by the program.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            GmsError::Dimension { .. }
                | GmsError::Config(_)
                | GmsError::Usage(_)
                | GmsError::Validation(_)
                | GmsError::Contract(_)
                | GmsError::Parse { .. }
                | GmsError::Format(_)
                | GmsError::Version { .. }
                | GmsError::Corruption(_)
        )
    }
}
