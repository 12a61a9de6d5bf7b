use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes shared by every layer of the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("unknown arm index {0}")]
    UnknownArm(usize),
    #[error("unknown task index {0}")]
    UnknownTask(usize),
    #[error("unknown action index {0}")]
    UnknownAction(usize),
    #[error("items do not span the design space (rank {rank} < {dim})")]
    RankDeficient { rank: usize, dim: usize },
    #[error("target set is empty")]
    EmptyTargets,
    #[error("design covariance is singular")]
    SingularCovariance,
    #[error("rounding needs N >= {required}, got {got}")]
    NTooSmall { required: usize, got: usize },
    #[error("rounded batch factor {factor:.6} exceeds 1 + zeta = {bound:.6}")]
    RoundingFailed { factor: f64, bound: f64 },
    #[error("batch Gram matrix is singular")]
    SingularBatch,
    #[error("realized context-action Gram matrix is singular after jitter")]
    SingularRealizedGram,
    #[error("reduced Gram matrix is singular")]
    SingularReducedGram,
    #[error("basis shapes differ: {0}")]
    ShapeMismatch(String),
    #[error("context model violates the coverage assumption (nu_hat = {0:e})")]
    Assumption3Violated(f64),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// Stable upper-case tag used in CSV flags and diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidShape(_) => "INVALID_SHAPE",
            Error::UnknownArm(_) => "UNKNOWN_ARM",
            Error::UnknownTask(_) => "UNKNOWN_TASK",
            Error::UnknownAction(_) => "UNKNOWN_ACTION",
            Error::RankDeficient { .. } => "RANK_DEFICIENT",
            Error::EmptyTargets => "EMPTY_TARGETS",
            Error::SingularCovariance => "SINGULAR_COVARIANCE",
            Error::NTooSmall { .. } => "N_TOO_SMALL",
            Error::RoundingFailed { .. } => "ROUNDING_FAILED",
            Error::SingularBatch => "SINGULAR_BATCH",
            Error::SingularRealizedGram => "SINGULAR_REALIZED_GRAM",
            Error::SingularReducedGram => "SINGULAR_REDUCED_GRAM",
            Error::ShapeMismatch(_) => "SHAPE_MISMATCH",
            Error::Assumption3Violated(_) => "ASSUMPTION3_VIOLATED",
            Error::Config(_) => "CONFIG_INVALID",
            Error::Io(_) => "IO",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}
