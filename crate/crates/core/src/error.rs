use thiserror::Error;

/// Errors raised while parsing data, fitting models or resampling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("tied observed times are not allowed: {times:?}")]
    Ties { times: Vec<f64> },
    #[error("line {line}: status {status} outside 0..={causes}")]
    StatusOutOfRange { line: u64, status: i64, causes: usize },
    #[error("line {line}: treatment must be 0 or 1, got {value}")]
    InvalidTreatment { line: u64, value: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("cause {cause} has no observed events in (0, tau]")]
    NoEvents { cause: usize },
    #[error("empty risk set at time {time}")]
    EmptyRiskSet { time: f64 },
    #[error("{what} is singular (condition estimate {condition:.3e})")]
    Singular { what: String, condition: f64 },
    #[error("cause {cause}: Newton-Raphson did not converge after {iterations} iterations")]
    NonConvergence { cause: usize, iterations: usize },
    #[error("cause {cause}: monotone likelihood, coefficients diverge (max |beta| = {norm:.3e}); data look separated")]
    Separation { cause: usize, norm: f64 },
    #[error("grid time {time} lies beyond tau = {tau}")]
    GridBeyondTau { time: f64, tau: f64 },
    #[error("level must lie strictly between 0 and 1, got {0}")]
    InvalidLevel(f64),
    #[error("{replicates} replicates are too few for level {level} (need at least {required})")]
    TooFewReplicates { replicates: usize, level: f64, required: usize },
    #[error("{failed} of {total} bootstrap refits failed (limit 10%)")]
    ReplicateFailures { failed: usize, total: usize },
    #[error("variance vanishes at interior grid time {time}; stabilized band undefined")]
    VanishingVariance { time: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoEvents { .. }
                | Error::EmptyRiskSet { .. }
                | Error::Singular { .. }
                | Error::NonConvergence { .. }
                | Error::Separation { .. }
                | Error::ReplicateFailures { .. }
                | Error::VanishingVariance { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
