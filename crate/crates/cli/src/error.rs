use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dinv_core::Error),

    #[error("usage: {0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 usage, 3 data or other failure, 4 numeric divergence.
    pub fn exit_code(&self) -> u8 {
        use dinv_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::InvalidArgument(_) | E::UnknownArch(_)) => 2,
            CliError::Core(E::Divergence { .. }) => 4,
            _ => 3,
        }
    }
}

pub fn io(path: &std::path::Path, source: std::io::Error) -> CliError {
    CliError::Io { path: path.to_path_buf(), source }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}
