use serde_json::json;
use std::path::PathBuf;

/// Failure of one CLI command, reported on stderr as
/// `{"error": {"code": ..., "message": ...}}`.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("plan does not fit the model: {0}")]
    PlanMismatch(String),

    #[error("checkpoint architecture does not match the config: {0}")]
    ArchitectureMismatch(String),

    #[error(transparent)]
    Core(#[from] echoatt::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::MissingFile(_) => "missing_file",
            CliError::PlanMismatch(_) => "plan_mismatch",
            CliError::ArchitectureMismatch(_) => "architecture_mismatch",
            CliError::Core(e) => e.code(),
        }
    }

    /// Process exit status; one value per error code.
    pub fn exit_code(&self) -> i32 {
        match self.code() {
            "usage" => 2,
            "invalid_config" => 3,
            "missing_file" => 4,
            "plan_mismatch" => 5,
            "architecture_mismatch" => 6,
            "bad_checkpoint" => 7,
            "io_error" => 8,
            "contract_violation" => 9,
            "invalid_input" => 10,
            "shape_mismatch" => 11,
            "degenerate_input" => 12,
            "non_finite_gradient" => 13,
            "json_error" => 14,
            "csv_error" => 15,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({ "error": { "code": self.code(), "message": self.to_string() } })
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
