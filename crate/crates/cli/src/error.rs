use perception_perf::Error as CoreError;

/// CLI failure, tagged with the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("stage failed: {0}")]
    Stage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Stage(_) => 3,
        }
    }

    /// Wraps a core error raised while reading inputs.
    pub fn input(context: impl std::fmt::Display, e: CoreError) -> Self {
        CliError::Data(format!("{context}: {e}"))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Parse { .. }
            | CoreError::Validation(_)
            | CoreError::Parameter(_)
            | CoreError::UnknownPreset(_)
            | CoreError::LengthMismatch(_)
            | CoreError::Csv(_)
            | CoreError::Json(_) => CliError::Data(e.to_string()),
            CoreError::Io { .. }
            | CoreError::Fit(_)
            | CoreError::UnstableQueue { .. }
            | CoreError::Degenerate(_) => CliError::Stage(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
