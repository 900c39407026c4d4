use tca_core::TcaError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] TcaError),
    /// The fit finished without meeting its convergence test; the result
    /// document has been written.
    #[error("optimizer stopped before converging (result written to {0})")]
    NotConverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::NotConverged(_) => 4,
            CliError::Core(e) => match e {
                TcaError::InvalidData(_)
                | TcaError::DimensionMismatch { .. }
                | TcaError::InvalidTree(_)
                | TcaError::InvalidVertex { .. }
                | TcaError::InvalidSubtree(_)
                | TcaError::InvalidTreewidth { .. }
                | TcaError::InvalidConfig(_)
                | TcaError::Parse { .. }
                | TcaError::Io { .. }
                | TcaError::Serde(_) => 2,
                TcaError::SingularCovariance { .. }
                | TcaError::SingularMatrix { .. }
                | TcaError::NotSpd
                | TcaError::NotOrthogonal { .. }
                | TcaError::DegenerateData(_)
                | TcaError::DegenerateComponent { .. }
                | TcaError::ZeroRow(_) => 3,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
