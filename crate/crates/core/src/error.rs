use thiserror::Error;

/// Errors raised across the sketching, calibration and decoding stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scale {0}: scales must be strictly positive and finite")]
    InvalidScale(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("feature map has no analytic derivative")]
    NoDerivative,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("calibration degenerate: recovered row {row} has zero norm")]
    CalibrationDegenerate { row: usize },

    #[error("sketch metadata mismatch: {0}")]
    SketchMismatch(String),

    #[error("weights are not normalized (sum = {0})")]
    UnnormalizedWeights(f64),

    #[error("missing class {0} in labelled data")]
    MissingClass(usize),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("remote peer reported: {0}")]
    Remote(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
