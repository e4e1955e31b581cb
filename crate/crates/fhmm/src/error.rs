//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by model validation, inference, and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor does not have the shape demanded by the model spec.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A column of exp(A) or a row of pi fails the probability constraint.
    #[error("non-stochastic column: {0}")]
    NonStochasticColumn(String),

    /// The observation covariance is not symmetric positive definite.
    #[error("covariance is not positive definite: {0}")]
    NonPositiveDefiniteCovariance(String),

    /// k^d does not fit in the platform index type.
    #[error("configuration count k^d overflows: k={k}, d={d}")]
    ConfigurationOverflow { k: usize, d: usize },

    /// The covariance matrix could not be factorized / inverted.
    #[error("singular covariance matrix")]
    SingularCovariance,

    /// A forward/backward normalizer collapsed to zero or NaN.
    #[error("numerical underflow: {0}")]
    NumericalUnderflow(String),

    /// The <s s> accumulator of the M-step has numerical rank zero.
    #[error("degenerate second-moment accumulator in M-step")]
    DegenerateMoments,

    /// Fit options are inconsistent or out of range.
    #[error("invalid options: {0}")]
    InvalidOptions(String),

    /// Hessian evaluation requires W in canonical form.
    #[error("weights not in canonical form: {0}")]
    NonCanonicalWeights(String),

    /// Negative Hessian is not positive definite; standard errors undefined.
    #[error("observed information is not positive definite (eigenvalue {eigenvalue:e})")]
    SingularInformation { eigenvalue: f64 },

    /// Cross-validation windows cannot be laid out over the data.
    #[error("infeasible cross-validation plan: {0}")]
    InfeasiblePlan(String),

    /// Evidence ratio is undefined when both models have the same size.
    #[error("evidence ratio undefined: models have equal parameter counts")]
    DegenerateComparison,

    /// The second-spectrum frequency band yields fewer than two lags.
    #[error("frequency band too narrow: only {lags} usable lag(s)")]
    BandTooNarrow { lags: usize },

    /// The series is shorter than the analysis requires.
    #[error("series too short: length {len}, need at least {needed}")]
    SeriesTooShort { len: usize, needed: usize },

    /// A parallel task failed; the index refers to the task list order.
    #[error("task {index} failed: {message}")]
    TaskFailed { index: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
