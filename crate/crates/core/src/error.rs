use thiserror::Error;

#[derive(Debug, Error)]
pub enum TcaError {
    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("sample covariance is singular (smallest/largest eigenvalue ratio {ratio:e})")]
    SingularCovariance { ratio: f64 },

    #[error("matrix is singular (|det| = {det:e})")]
    SingularMatrix { det: f64 },

    #[error("matrix is not symmetric positive definite")]
    NotSpd,

    #[error("matrix is not orthogonal (max deviation {deviation:e})")]
    NotOrthogonal { deviation: f64 },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("component {index} is degenerate: {reason}")]
    DegenerateComponent { index: usize, reason: String },

    #[error("row {0} of the demixing matrix has zero variance")]
    ZeroRow(usize),

    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("vertex {vertex} out of range for {m} vertices")]
    InvalidVertex { vertex: usize, m: usize },

    #[error("invalid subtree: {0}")]
    InvalidSubtree(String),

    #[error("invalid treewidth {tau} for m = {m} (need 1 <= tau <= min(m - 1, 4))")]
    InvalidTreewidth { tau: usize, m: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TcaError>;

impl TcaError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        TcaError::Io {
            context: context.into(),
            source,
        }
    }
}
