use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not fit the operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A configuration value violates a structural constraint.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates a value-level precondition (e.g. non-binary mask).
    #[error("validation error: {0}")]
    Validation(String),

    /// API misuse such as a second backward pass on the same tape.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// The support mask has no foreground cell at feature resolution.
    #[error("degenerate episode: {0}")]
    DegenerateEpisode(String),

    #[error("incomplete evaluation: class {class} has no scored episode")]
    IncompleteEvaluation { class: usize },

    /// Malformed tensor or checkpoint file.
    #[error("format error in field `{field}`: {detail}")]
    Format { field: &'static str, detail: String },

    #[error("training diverged: non-finite loss at episode seed {seed:#018x}")]
    Diverged { seed: u64 },

    #[error("gradient check failed: max relative error {error:.3e} at {location}")]
    GradCheck { error: f64, location: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn shapes(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            detail: format!("incompatible shapes {lhs:?} and {rhs:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short tag for the machine-parseable CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::Validation(_) => "validation",
            Error::Usage(_) => "usage",
            Error::NonFinite { .. } => "non_finite",
            Error::DegenerateEpisode(_) => "degenerate_episode",
            Error::IncompleteEvaluation { .. } => "incomplete_evaluation",
            Error::Format { .. } => "format",
            Error::Diverged { .. } => "diverged",
            Error::GradCheck { .. } => "gradcheck",
            Error::Io { .. } => "io",
        }
    }
}
