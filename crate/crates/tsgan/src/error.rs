use std::path::{Path, PathBuf};

/// Failure categories of the command-line tool; each maps to its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("numeric: {0}")]
    Numeric(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 3,
            CliError::Data(_) => 4,
            CliError::Numeric(_) => 5,
            CliError::Io { .. } => 6,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
            CliError::Io { .. } => "io",
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<tsgan_core::Error> for CliError {
    fn from(e: tsgan_core::Error) -> Self {
        use tsgan_core::Error as E;
        match e {
            E::Config(_) | E::TeacherNotReady => CliError::Config(e.to_string()),
            E::NonFinite(_) | E::NonFiniteLoss(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
