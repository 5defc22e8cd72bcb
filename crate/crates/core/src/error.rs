use thiserror::Error;

pub type Result<T> = std::result::Result<T, NopgError>;

#[derive(Debug, Error)]
pub enum NopgError {
    #[error("invalid bandwidth: {0}")]
    InvalidBandwidth(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    /// Every kernel weight underflowed; `nearest` is the index of the closest sample.
    #[error("degenerate query: all kernel weights underflow (nearest sample {nearest})")]
    DegenerateQuery { nearest: usize },

    #[error("invalid policy parameters: {0}")]
    InvalidParameters(String),

    #[error("operation not supported for {mode} policies: {op}")]
    UnsupportedMode { mode: &'static str, op: &'static str },

    #[error("linear solver failed to converge (best relative residual {best_residual:.3e})")]
    SolverFailure { best_residual: f64 },

    #[error("stale solution: built with sample token {solution}, gradient requested with {samples}")]
    StaleSolution { solution: u64, samples: u64 },

    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("solver failure at iteration {iteration}: {source}")]
    TrainingSolver {
        iteration: usize,
        #[source]
        source: Box<NopgError>,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}
