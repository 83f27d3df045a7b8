//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the lending-analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Input contained no records at all.
    #[error("no records in input")]
    NoRecords,

    /// A CSV row could not be parsed; `row` is 1-based and counts the header.
    #[error("row {row}, column `{column}`: {message}")]
    Csv {
        row: usize,
        column: String,
        message: String,
    },

    /// Underlying I/O failure while reading or writing a file.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A payment history violates the monotone default convention.
    #[error("loan {id}: {message}")]
    MalformedPayments { id: u64, message: String },

    /// Repayment outcome requested for a right-censored history.
    #[error("loan {id}: payment history is right-censored; outcome is undefined, use the survival encoding")]
    CensoredOutcome { id: u64 },

    /// Spline knots could not be placed on the requested values.
    #[error("cannot place knots: {0}")]
    DegenerateKnots(String),

    /// Configuration value out of its documented range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The design matrix lost full column rank.
    #[error("design matrix is rank deficient; suspect column `{0}`")]
    RankDeficient(String),

    /// Newton iterations exhausted without meeting the convergence criteria.
    #[error("partial-likelihood fit did not converge after {iterations} iterations (relative gradient norm {gradient_norm:.3e})")]
    NoConvergence {
        iterations: usize,
        gradient_norm: f64,
    },

    /// Not a single event month in the data; nothing to fit.
    #[error("no default events in the fitting sample")]
    NoEvents,

    /// Concordance is undefined without at least one usable pair.
    #[error("no comparable pairs for concordance")]
    NoComparablePairs,

    /// Residual diagnostics need events spread over more than one month.
    #[error("all events occur in a single month; residual test is undefined")]
    ResidualsUndefined,

    /// Both genders must be present for any disparity estimate.
    #[error("sample contains a single gender; disparity is undefined")]
    SingleGender,

    /// Too many bootstrap replicates failed to refit.
    #[error("{failed} of {total} bootstrap replicates failed to fit (more than 10%)")]
    BootstrapFailures { failed: usize, total: usize },

    /// The sampler finished its budget without passing the convergence gates.
    #[error("sampler did not converge: max split r-hat {rhat:.4} (limit {limit}), min ess {ess:.0} (floor {floor})")]
    NoMixing {
        rhat: f64,
        limit: f64,
        ess: f64,
        floor: f64,
    },

    /// A market specification is internally inconsistent.
    #[error("invalid market spec: {0}")]
    InvalidMarketSpec(String),

    /// Model file could not be decoded.
    #[error("model file: {0}")]
    ModelDecode(String),

    /// Serialization failure (report or model output).
    #[error("serialization: {0}")]
    Serialize(String),
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Serialize(err.to_string())
    }
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
