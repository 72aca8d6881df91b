use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("correlation coefficient {0} lies outside [-1, 1]")]
    CorrelationDomain(f64),

    #[error("degenerate state: {0}")]
    DegenerateState(&'static str),

    #[error("length boundary is at infinity (1 - k/(1+k)/pi = {0})")]
    BoundaryAtInfinity(f64),

    #[error("iteration did not converge after {iterations} steps (last iterate {last})")]
    NonConvergence { iterations: usize, last: f64 },

    #[error("coefficient - 1 does not change sign on [{lo}, {hi}]")]
    NotBracketed { lo: f64, hi: f64 },

    #[error("boundary not bracketed by the grid: {0}")]
    BoundaryNotBracketed(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("malformed config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable tag, used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::CorrelationDomain(_) => "correlation_domain",
            Error::DegenerateState(_) => "degenerate_state",
            Error::BoundaryAtInfinity(_) => "boundary_at_infinity",
            Error::NonConvergence { .. } => "non_convergence",
            Error::NotBracketed { .. } => "not_bracketed",
            Error::BoundaryNotBracketed(_) => "boundary_not_bracketed",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn ensure_finite(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be finite, got {value}")))
    }
}
