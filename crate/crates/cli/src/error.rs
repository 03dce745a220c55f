use std::path::PathBuf;

use sda_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] Error),

    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: Error },
}

impl CliError {
    pub fn file(path: impl Into<PathBuf>) -> impl FnOnce(Error) -> CliError {
        let path = path.into();
        move |source| CliError::File { path, source }
    }

    /// 2 for invalid input, 3 for numerical failure, 4 for I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) | CliError::File { source: e, .. } => core_code(e),
        }
    }
}

fn core_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format(_) => 4,
        Error::Autodiff(_) => 3,
        e if e.is_numerical() => 3,
        _ => 2,
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
