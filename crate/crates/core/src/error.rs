//! Crate-wide error type.

/// Errors surfaced by the numeric kernels, the trainer, and persistence.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operands have incompatible dimensions or shapes.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A graph that must be acyclic contains a cycle.
    #[error("cyclic graph: {0}")]
    CyclicGraph(String),
    /// A matrix that must be positive definite is not.
    #[error("not positive definite: {0}")]
    NotPositiveDefinite(String),
    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// A differentiation-graph construction error (shape or operand misuse).
    #[error("graph construction: {0}")]
    GraphConstruction(String),
    /// An on-disk artifact is malformed or disagrees with its metadata.
    #[error("format error: {0}")]
    Format(String),
    /// A checkpoint was produced under a different configuration.
    #[error("config hash mismatch: {0}")]
    ConfigHashMismatch(String),
    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(format!("csv: {e}"))
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short stable identifier for machine-readable error reporting.
    pub fn class(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::CyclicGraph(_) => "cyclic_graph",
            Error::NotPositiveDefinite(_) => "not_positive_definite",
            Error::NonFinite(_) => "non_finite",
            Error::GraphConstruction(_) => "graph_construction",
            Error::Format(_) => "format_error",
            Error::ConfigHashMismatch(_) => "config_hash_mismatch",
            Error::Io(_) => "io_error",
        }
    }
}
