use std::path::PathBuf;

/// Errors produced anywhere in the crate.
///
/// The CLI maps these onto process exit codes: configuration problems
/// exit with 2, data/file problems with 3, internal invariant violations
/// with 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error in {path}: {detail}")]
    Data { path: PathBuf, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("state error: {0}")]
    State(String),

    #[error("evaluation produced a non-finite value: {0}")]
    NonFinite(String),

    #[error("undefined entropy: class {0} has no predicted samples")]
    EmptyClass(usize),

    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn data(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension { .. } => 2,
            Error::Data { .. } | Error::Format(_) | Error::Io(_) | Error::Json(_) => 3,
            _ => 4,
        }
    }
}
