use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("arithmetic overflow: {0}")]
    Overflow(String),

    #[error("privacy budget overflow at alpha={alpha}: raise sigma or lower alpha")]
    BudgetOverflow { alpha: f64 },

    #[error("target epsilon {target} unreachable for noise multiplier in [{lo}, {hi}]")]
    TargetUnreachable { target: f64, lo: f64, hi: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite gradient for root node {root}")]
    NonFiniteGradient { root: usize },

    #[error("degenerate initialization: {0}")]
    DegenerateInit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by bad user input rather than a failing computation.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter(_) | Error::Config(_) | Error::Parse { .. } | Error::InvalidGraph(_)
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::InvalidGraph(_) => "invalid_graph",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Overflow(_) => "overflow",
            Error::BudgetOverflow { .. } => "budget_overflow",
            Error::TargetUnreachable { .. } => "target_unreachable",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::DegenerateInit(_) => "degenerate_init",
            Error::Config(_) => "config",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
