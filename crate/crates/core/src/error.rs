use std::path::PathBuf;

/// Errors surfaced by model construction, training and evaluation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("{what} out of range: {detail}")]
    OutOfRange { what: &'static str, detail: String },
    #[error("unknown config key `{key}`{}", suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
    UnknownKey { key: String, suggestion: Option<String> },
    #[error("invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: String },
    #[error("unknown feature provider `{0}`")]
    UnknownProvider(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("mode mismatch: {0}")]
    ModeMismatch(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("auto-guidance requested without an auxiliary model")]
    MissingAuxModel,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint field `{field}` mismatch: stored {stored}, expected {expected}")]
    CheckpointMismatch { field: String, stored: String, expected: String },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by user input rather than internal failures.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::NonFinite { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
