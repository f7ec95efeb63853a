use thiserror::Error;

/// Errors raised by the modeling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("overlapping at-risk intervals for subject {subject}")]
    Overlap { subject: String },

    #[error("unknown level-1 group {0}")]
    UnknownGroup(String),

    #[error("imputed copy {copy} differs from copy 0 at row {row}: {what}")]
    StackMismatch { copy: usize, row: usize, what: String },

    #[error("linear predictor is not finite; rescale covariates and retry")]
    NonFiniteLinearPredictor,

    #[error("Newton iterations did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize, last: Vec<f64> },

    #[error("empty risk set at event time {0}")]
    EmptyRiskSet(f64),

    #[error("information matrix is singular or not positive definite")]
    Singular,

    #[error("no events in data")]
    NoEvents,

    #[error("covariate {0} is constant")]
    ConstantCovariate(String),

    #[error("row {row} has a missing value for covariate {covariate}")]
    MissingCovariate { row: usize, covariate: String },

    #[error("program(s) absent from training data: {0:?}")]
    ProgramsNotInTraining(Vec<String>),

    #[error("degenerate test: variance must be positive")]
    DegenerateTest,

    #[error("refit for jackknife block {block} failed: {source}")]
    BlockFit { block: usize, source: Box<Error> },

    #[error("covariate selection failed after {completed} iteration(s): {source}")]
    Selection {
        completed: usize,
        trace: Box<crate::pooling::SelectionTrace>,
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input or configuration rather than by a
    /// numerical failure during fitting.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::Validation(_)
                | Error::Overlap { .. }
                | Error::UnknownGroup(_)
                | Error::StackMismatch { .. }
                | Error::MissingCovariate { .. }
                | Error::ProgramsNotInTraining(_)
                | Error::Config(_)
                | Error::Csv(_)
                | Error::Json(_)
                | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
