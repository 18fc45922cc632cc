use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("support mismatch: {0}")]
    SupportMismatch(String),

    #[error("parameter out of range: {0}")]
    OutOfRange(String),

    #[error("tilted distribution is degenerate: the geometric mixture vanishes on the whole support")]
    DegenerateTilt,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("x = {x} is outside the domain {domain}")]
    OutOfDomain { x: f64, domain: String },

    #[error("invalid ladder: {0}")]
    InvalidLadder(String),

    #[error("invalid diffeomorphism bundle: {0}")]
    InvalidBundle(String),

    #[error(
        "weight set at level {level} would contain {count} vectors (sum_k 2^k C({dim},k) C({radius},k)), above the cap {cap}"
    )]
    EnumerationTooLarge {
        level: usize,
        count: u128,
        dim: usize,
        radius: u64,
        cap: u128,
    },

    #[error("level {level} is not trained (model has {trained} levels)")]
    LevelNotTrained { level: usize, trained: usize },

    #[error("model/weights mismatch: {0}")]
    ModelMismatch(String),

    #[error("bound inapplicable: {0}")]
    BoundInapplicable(String),

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("format error: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
