use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("dataset is already reversed")]
    AlreadyReversed,

    #[error("curvature must be positive, got {0}")]
    NonPositiveCurvature(f64),

    #[error("empty fitting scope")]
    EmptyScope,

    #[error("no active couplings left to decimate")]
    NoActiveCouplings,

    #[error("scope mismatch: {0}")]
    ScopeMismatch(String),

    #[error("reference has zero norm")]
    ZeroNorm,

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {file}: {msg}")]
    Format { file: String, msg: String },

    #[error("checksum mismatch for {0}")]
    Checksum(String),

    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    Fingerprint { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error stems from bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
