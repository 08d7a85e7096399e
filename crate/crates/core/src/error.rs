use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite gradient for parameter `{name}` at step {step}")]
    NonFiniteGradient { name: String, step: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Stable machine-readable code, used by the CLI's error JSON.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape_mismatch",
            Error::Contract(_) => "contract_violation",
            Error::Input(_) => "invalid_input",
            Error::Degenerate(_) => "degenerate_input",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::Config(_) => "invalid_config",
            Error::Format(_) => "bad_checkpoint",
            Error::Io(_) => "io_error",
            Error::Json(_) => "json_error",
            Error::Csv(_) => "csv_error",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
