use thiserror::Error;

/// Errors raised by the library.
///
/// The variants map one-to-one onto the CLI exit codes: configuration and
/// usage problems are the caller's fault, convergence/capacity/range
/// problems are limits of the numerical method.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("corrector did not converge after {iterations} iterations (residual {residual:e}){}", env_seed.map(|s| format!(", environment seed {s}")).unwrap_or_default())]
    Convergence {
        iterations: usize,
        residual: f64,
        env_seed: Option<u64>,
    },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn usage(reason: impl Into<String>) -> Self {
        Error::Usage(reason.into())
    }

    /// Short machine-readable tag for the error family.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::Usage(_) => "usage",
            Error::Convergence { .. } => "convergence",
            Error::Capacity(_) => "capacity",
            Error::Numerical(_) => "numerical",
            Error::Range(_) => "range",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
