use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown target `{0}`")]
    UnknownTarget(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("antithetic batches need an even batch size, got {0}")]
    OddAntitheticBatch(usize),

    #[error("cube dimension {dim} exceeds the Halton prime table ({max} bases)")]
    PrimeTableExceeded { dim: usize, max: usize },

    #[error("{what} must lie in (0, 1), got {value}")]
    OutOfDomain { what: &'static str, value: f64 },

    #[error("quadrature did not converge: {0}")]
    QuadratureNonConvergent(String),

    #[error("importance sampling effective sample size {ess:.1} is below {required:.1}")]
    LowEffectiveSampleSize { ess: f64, required: f64 },

    #[error("every candidate in the batch has zero weight")]
    DegenerateBatch,

    #[error("MAP search diverged: {0}")]
    MapDiverged(String),

    #[error("objective is not finite at the initial point (batch {batch})")]
    NonFiniteObjective { batch: usize },

    #[error("grid covers only {coverage:.6} of the posterior mass (need 0.999)")]
    GridCoverage { coverage: f64 },

    #[error("{degenerate} of {total} batches were degenerate")]
    TooManyDegenerate { degenerate: usize, total: usize },

    #[error("need at least {need} valid records, got {have}")]
    TooFewRecords { have: usize, need: usize },
}
