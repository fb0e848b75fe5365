use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("input norm {norm:e} is below the floor {floor:e}")]
    ZeroNormInput { norm: f64, floor: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("rollout diverged at step {step}")]
    NonFiniteState { step: usize },

    #[error("sequence length {len} is not a multiple of the compression factor {factor}")]
    LengthNotCompressible { len: usize, factor: usize },

    #[error("vector norm {norm} deviates from 1 by more than {tol:e}")]
    NonUnitInput { norm: f64, tol: f64 },

    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    DegenerateBatch(usize),

    #[error("loss became non-finite at step {step}")]
    DivergenceDetected { step: usize },

    #[error("{name} = {value} is outside [{lo}, {hi}]")]
    RangeError {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("prompt contains an empty clause at position {0}")]
    EmptyClause(usize),

    #[error("overlap {overlap} is too large for a stage of length {len}")]
    OverlapTooLarge { overlap: usize, len: usize },

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("boundary {index} is out of range for a trajectory of {len} states")]
    BoundaryOutOfRange { index: usize, len: usize },

    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("closed-loop state gain {0} is not below 1")]
    UnstableWorld(f64),

    #[error("minimum pre-projection norm {rho:e} is below the floor {floor:e}")]
    DegenerateRho { rho: f64, floor: f64 },

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("io: {0}")]
    Io(String),

    #[error("serialization: {0}")]
    Serde(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Error {
    Error::ShapeMismatch {
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    }
}
