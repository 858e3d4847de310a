use std::path::PathBuf;

/// Errors raised across the library. Variants map onto CLI exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid value for `{field}`: {msg}")]
    Invariant { field: &'static str, msg: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported state: {0}")]
    Unsupported(String),

    #[error("grid extent: {0}")]
    GridExtent(String),

    #[error("resolution: {0}")]
    Resolution(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("precondition: {0}")]
    Precondition(String),

    #[error("fit failed: residual {residual:.3e} exceeds tolerance {tolerance:.3e} at M = {m}")]
    FitFailure {
        residual: f64,
        tolerance: f64,
        m: usize,
        best: Box<crate::expfit::ExpModes>,
    },

    #[error("hierarchy size {size} exceeds cap {cap}")]
    HierarchyCap { size: u128, cap: usize },

    #[error("trajectory rejected: {0}")]
    Rejected(String),

    #[error("numerical blow-up: {0}")]
    Unstable(String),

    #[error("input: {0}")]
    Input(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by an invalid configuration value.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Invariant { .. } | Error::Parse { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
