use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: row {row}: {msg}")]
    Parse {
        path: PathBuf,
        row: usize,
        msg: String,
    },

    #[error("{path}: {msg}")]
    Schema { path: PathBuf, msg: String },

    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("split sizes {requested} exceed dataset size {available}")]
    SplitSize { requested: usize, available: usize },

    #[error("invalid parameter `{name}`: {msg}")]
    InvalidParameter { name: &'static str, msg: String },

    #[error("all kernel values vanish on the admissible support of query {query}")]
    DegenerateKernel { query: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{0}")]
    Degenerate(String),

    #[error("bisection did not converge: {0}")]
    NoConvergence(String),

    #[error("unsupported state document version {0}")]
    StateVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            msg: msg.into(),
        }
    }

    /// Short stable tag used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Schema { .. } => "schema",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::SplitSize { .. } => "split_size",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::DegenerateKernel { .. } => "degenerate_kernel",
            Error::Empty(_) => "empty",
            Error::Degenerate(_) => "degenerate",
            Error::NoConvergence(_) => "no_convergence",
            Error::StateVersion(_) => "state_version",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
