use thiserror::Error;

/// Errors produced by the fitting, screening and I/O routines.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shapes, ranges, ordering).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid response {value} for the {family} family")]
    InvalidResponse { family: &'static str, value: f64 },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("sampler initialization failed for study '{study}': {reason}")]
    SamplerInit { study: String, reason: String },

    #[error("MCECM diverged after {iterations} iterations: {reason}")]
    Divergence { iterations: usize, reason: String },

    #[error("gene '{gene}' not found in study '{study}'")]
    UnknownGene { gene: String, study: String },

    #[error("{source_name}: line {line}, column '{column}': {message}")]
    Parse {
        source_name: String,
        line: usize,
        column: String,
        message: String,
    },

    #[error("every grid point failed: {}", .0.join("; "))]
    AllFitsFailed(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
