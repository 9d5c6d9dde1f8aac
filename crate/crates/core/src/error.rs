use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("parameters are normalized; denormalize before synthesis")]
    NormalizedParams,

    #[error("parameter normalization state mismatch: expected normalized={expected}")]
    NormalizationState { expected: bool },

    #[error("model carries no parameter statistics")]
    MissingStats,

    #[error("rotation is not orthonormal with determinant +1 (deviation {deviation:.3e})")]
    NotARotation { deviation: f64 },

    #[error("vertex {0} has no incident non-degenerate triangle")]
    IsolatedVertex(usize),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("rank-deficient point-to-plane system (rank {rank} of 6)")]
    RankDeficient { rank: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("unsupported {format} version {found}")]
    UnsupportedVersion { format: String, found: u64 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("missing required key '{0}'")]
    MissingKey(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document: {0}")]
    Json(#[from] serde_json::Error),

    #[error("audio container: {0}")]
    Wav(#[from] hound::Error),
}

/// Coarse classification used by the CLI exit-code contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Singular(_)
            | Error::RankDeficient { .. }
            | Error::NonFinite(_)
            | Error::IsolatedVertex(_) => ErrorKind::Numerical,
            _ => ErrorKind::Validation,
        }
    }

    /// Attaches `path` to an I/O failure.
    pub(crate) fn at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::File {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn dim(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected,
            got,
        }
    }
}
