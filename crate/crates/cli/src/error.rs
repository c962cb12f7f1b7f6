use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] stsg::Error),

    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Budget(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(stsg::Error::Config(_) | stsg::Error::Parameter(_)) => 1,
            CliError::Core(_) | CliError::Data(_) => 2,
            CliError::Budget(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            1 => "usage",
            3 => "budget",
            _ => "data",
        }
    }

    /// One JSON object for stderr.
    pub fn json_line(&self) -> String {
        json!({ "error": self.kind(), "code": self.exit_code(), "message": self.to_string() }).to_string()
    }
}
