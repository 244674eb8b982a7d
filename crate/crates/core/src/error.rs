use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("infeasible rules `{rule}`: {detail}")]
    InfeasibleRules { rule: String, detail: String },

    #[error("training diverged at epoch {epoch}, chunk {chunk}: {detail}")]
    Diverged {
        epoch: usize,
        chunk: String,
        detail: String,
    },

    #[error("format error in {}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("wav error on {}: {source}", path.display())]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Numeric { .. } => "numeric",
            Error::Usage(_) => "usage",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Alignment(_) => "alignment",
            Error::Geometry(_) => "geometry",
            Error::Metric(_) => "metric",
            Error::Manifest(_) => "manifest",
            Error::InfeasibleRules { .. } => "infeasible_rules",
            Error::Diverged { .. } => "diverged",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Wav { .. } => "wav",
            Error::Csv(_) => "csv",
        }
    }

    /// Whether the failure is attributable to user input (bad config, data or
    /// arguments) rather than an internal fault.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::Dimension { .. } | Error::Numeric { .. } | Error::Diverged { .. }
        )
    }
}
