use std::path::PathBuf;

use thiserror::Error;

/// Every failure the lab can report.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("data error at transition {idx}: {reason}")]
    Data { idx: usize, reason: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training diverged: |theta|_inf = {norm:e} exceeds {limit:e}")]
    Divergence { norm: f64, limit: f64 },

    #[error("ill-conditioned hessian (condition number {condition:e}); increase damping")]
    IllConditioned { condition: f64 },

    #[error("surface `{surface}` is not supported by {reason}")]
    UnsupportedSurface { surface: String, reason: String },

    #[error("insufficient data: need at least {needed} transitions, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("parse error in {context}: {reason}")]
    Parse { context: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LabError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        LabError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn parse(context: impl Into<String>, reason: impl ToString) -> Self {
        LabError::Parse {
            context: context.into(),
            reason: reason.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation problems are the caller's fault; everything else is a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            LabError::Config { .. } | LabError::Argument(_) | LabError::Parse { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
