use chm_core::ChmError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config keys or values, or a referenced path that does not exist.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] ChmError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("selfcheck: {failed} of {total} checks failed")]
    Selfcheck { failed: usize, total: usize },
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(ChmError::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Run(ChmError::Config(_)) | CliError::Run(ChmError::InvalidGeometry(_)) => 1,
            CliError::Selfcheck { .. } => 3,
            _ => 2,
        }
    }
}
