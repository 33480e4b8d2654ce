use drbc_core::DrbcError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn io(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{context}: {e}"))
    }
}

impl From<DrbcError> for CliError {
    fn from(e: DrbcError) -> Self {
        let msg = e.to_string();
        match e {
            DrbcError::InvalidInput(_) => CliError::Config(msg),
            DrbcError::DimensionMismatch { .. }
            | DrbcError::InsufficientHistory { .. }
            | DrbcError::OffGrid(_)
            | DrbcError::Data(_)
            | DrbcError::Io(_)
            | DrbcError::Csv(_) => CliError::Data(msg),
            DrbcError::NonFiniteEvaluation { .. }
            | DrbcError::BracketFailure { .. }
            | DrbcError::DegenerateGradient(_)
            | DrbcError::VarianceUndefined(_)
            | DrbcError::Infeasible { .. }
            | DrbcError::ZeroVariance(_)
            | DrbcError::NoConvergence(_) => CliError::Numeric(msg),
        }
    }
}
