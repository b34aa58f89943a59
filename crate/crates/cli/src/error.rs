use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] percfield_core::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    /// 2 for configuration problems, 3 for everything data-related.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }
}
