use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("parameter `{name}` = {value} out of range: {reason}")]
    ParameterOutOfRange {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("only random intercepts supported (term at byte {offset})")]
    RandomSlope { offset: usize },

    #[error("unknown factor `{0}`")]
    UnknownFactor(String),

    #[error("row index {index} out of range 1..={rows}")]
    RowOutOfRange { index: usize, rows: usize },

    #[error("dispersion undefined at boundary: {0}")]
    DegenerateData(&'static str),

    #[error("REML optimizer did not converge after {evaluations} evaluations (best -2 log L_R = {best_deviance})")]
    NonConvergence {
        evaluations: usize,
        best_deviance: f64,
        best_sigma2: Vec<f64>,
    },

    #[error("bootstrap replicate {replicate}: refit failed on {attempts} consecutive resamples")]
    RetryBudgetExhausted { replicate: usize, attempts: usize },

    #[error("invalid setting: {0}")]
    InvalidSetting(String),

    #[error("task mismatch: {0}")]
    TaskMismatch(String),
}

impl Error {
    pub(crate) fn out_of_range(name: &'static str, value: f64, reason: &'static str) -> Self {
        Error::ParameterOutOfRange {
            name,
            value,
            reason,
        }
    }
}
