use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("environment {0} is unsolvable: goal unreachable from start within the horizon")]
    UnsolvableEnvironment(String),

    #[error("invalid environment {id}: {reason}")]
    InvalidEnvironment { id: String, reason: String },

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("demonstration is not optimal under the true weights in {0}")]
    InvalidDemonstration(String),

    #[error("feature dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("empty pool")]
    EmptyPool,

    #[error("prior region is empty")]
    EmptyPrior,

    #[error("curriculum exhausted: no candidate conveys {0}")]
    CurriculumExhausted(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error("replay diverged at record {index}: {message}")]
    ReplayDiverged { index: usize, message: String },
}

impl Error {
    /// Short machine-readable kind, used for error records and HTTP mapping.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnsolvableEnvironment(_) => "unsolvable_environment",
            Error::InvalidEnvironment { .. } => "invalid_environment",
            Error::InvalidTrajectory(_) => "invalid_trajectory",
            Error::InvalidDemonstration(_) => "invalid_demonstration",
            Error::DimensionMismatch(..) => "dimension_mismatch",
            Error::InvalidWeights(_) => "invalid_weights",
            Error::EmptyPool => "empty_pool",
            Error::EmptyPrior => "empty_prior",
            Error::CurriculumExhausted(_) => "curriculum_exhausted",
            Error::Protocol(_) => "protocol",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::ReplayDiverged { .. } => "replay_diverged",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
