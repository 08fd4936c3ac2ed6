use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse { row: u64, column: String, message: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("[{stage}] {source}")]
    Core {
        stage: &'static str,
        #[source]
        source: spillover::Error,
    },
    #[error("[{stage}] {message}")]
    Numerical { stage: &'static str, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 2 for bad input or configuration, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        use spillover::Error as E;
        match self {
            CliError::Numerical { .. } => 3,
            CliError::Core { source, .. } => match source {
                E::NoConvergence { .. } | E::ZeroDensity(_) | E::SingularB11 | E::Numerical(_) => 3,
                _ => 2,
            },
            _ => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Tags a core error with the pipeline stage it came from.
pub trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> Stage<T> for spillover::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| CliError::Core { stage, source })
    }
}
