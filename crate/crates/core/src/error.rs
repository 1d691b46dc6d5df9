use thiserror::Error;

/// One schema or consistency problem found while validating a model.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ValidationIssue {
    pub field: String,
    pub message: String,
}

impl ValidationIssue {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("model validation failed: {}", format_issues(.0))]
    Validation(Vec<ValidationIssue>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("offspring law construction produced a negative coefficient p_{index} = {value:e} at x = {site}")]
    NegativeCoefficient { index: usize, value: f64, site: f64 },

    #[error("truncation remainder {remainder:e} exceeds 1e-6 with J_max = {j_max}; raise J_max")]
    JmaxTooSmall { j_max: usize, remainder: f64 },

    #[error("argument out of range: {0}")]
    Domain(String),

    #[error(
        "covariance not positive definite after maximum jitter {jitter:e} (m = {dim}, min pivot {min_pivot:e})"
    )]
    NumericalDegeneracy {
        dim: usize,
        jitter: f64,
        min_pivot: f64,
    },

    #[error("particle count {count} exceeded hard cap {cap} at t = {time}")]
    ParticleCap { count: usize, cap: usize, time: f64 },

    #[error("method {method} not applicable: {reason}")]
    Method { method: String, reason: String },

    #[error("{0} is not a snapshot time")]
    NotSnapshot(f64),

    #[error("duplicate stream label {0:?}")]
    DuplicateLabel(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

fn format_issues(issues: &[ValidationIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
