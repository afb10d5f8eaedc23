use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum WalkbackError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("operator error: {0}")]
    Operator(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("estimator error: {0}")]
    Estimator(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl WalkbackError {
    /// Short machine-readable tag used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            WalkbackError::Config(_) => "config",
            WalkbackError::Dimension { .. } => "dimension",
            WalkbackError::Usage(_) => "usage",
            WalkbackError::Training(_) => "training",
            WalkbackError::Operator(_) => "operator",
            WalkbackError::Domain(_) => "domain",
            WalkbackError::Estimator(_) => "estimator",
            WalkbackError::Parse { .. } => "parse",
            WalkbackError::Io(_) => "io",
            WalkbackError::Serde(_) => "serde",
            WalkbackError::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, WalkbackError>;

pub(crate) fn check_dim(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(WalkbackError::Dimension { expected, got, context })
    }
}
