use thiserror::Error;

/// Errors surfaced by ingestion, fitting, estimation and inference.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error at {path}:{line}: {msg}")]
    Csv {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("singular moment matrix in {context} (condition estimate {condition:.3e})")]
    Singular { context: String, condition: f64 },
    #[error("{context}: no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        context: String,
        iterations: usize,
        residual: f64,
    },
    #[error("{context}: newton step underflow (residual {residual:.3e})")]
    StepUnderflow { context: String, residual: f64 },
    #[error("bridge fit `{0}` is missing or unconverged")]
    UnconvergedBridge(&'static str),
    #[error("propensity estimate {value:.4} outside (0.01, 0.99) at row {row}")]
    PropensityOutOfRange { row: usize, value: f64 },
    #[error("bootstrap unstable: {failed} of {total} replicates failed")]
    BootstrapUnstable { failed: usize, total: usize },
    #[error("completeness violated: identification matrix singular in cell {cell}")]
    CompletenessViolated { cell: String },
    #[error("invalid law: {0}")]
    InvalidLaw(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
