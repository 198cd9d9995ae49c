use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Structural problem with an input file (missing column, bad header).
    #[error("format error: {0}")]
    Format(String),

    /// A cell could not be parsed. `row` is the 1-based data row.
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    /// Argument outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{what} did not converge within {iterations} iterations")]
    MaxIterations { what: &'static str, iterations: usize },

    /// A caller broke an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in plot {plot}: {message}")]
    Numeric { plot: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
