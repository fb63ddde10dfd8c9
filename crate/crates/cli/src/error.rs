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

    #[error(transparent)]
    Core(#[from] duoprompt_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 usage or configuration, 2 I/O, 3 numerical failure.
    pub fn exit_code(&self) -> u8 {
        use duoprompt_core::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Core(e) => match e {
                E::Config(_) | E::UnknownDomain(_) | E::UnknownTask(_) | E::MissingAux(_) => 1,
                E::Io { .. } | E::Format { .. } | E::InvalidSample { .. } | E::Json(_) => 2,
                _ => 3,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
