use thiserror::Error;

use crate::config::SCHEMA_HELP;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    /// Config problems; the schema is printed alongside.
    #[error("usage: {0}\n\n{SCHEMA_HELP}")]
    Schema(String),

    #[error(transparent)]
    Library(#[from] hmm_duality::Error),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for usage errors (including invalid inputs rejected by the
    /// library), 1 for numerical failures and I/O problems.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Schema(_) => 2,
            CliError::Library(hmm_duality::Error::InvalidArgument(_) | hmm_duality::Error::InvalidModel(_)) => 2,
            _ => 1,
        }
    }
}
