use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged: {message} (last good state written to {})", partial.display())]
    Diverged { message: String, partial: PathBuf },

    #[error(transparent)]
    Core(#[from] osr_ebm::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Core(osr_ebm::Error::Io(_)) => 1,
            CliError::Diverged { .. } => 3,
            CliError::Core(osr_ebm::Error::Divergence(_)) => 3,
            CliError::Usage(_) | CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
