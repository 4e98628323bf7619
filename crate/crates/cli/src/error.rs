use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Failures of a pipeline command. Every variant maps to its own process exit
/// code so scripts can tell them apart.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing {what}: {path} (run `{producer}` first)")]
    MissingArtifact {
        what: &'static str,
        path: PathBuf,
        producer: &'static str,
    },
    #[error("config hash mismatch: run directory has {stored}, {source_name} has {found}; pass --force to start over")]
    HashMismatch {
        stored: String,
        found: String,
        source_name: String,
    },
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("run directory is locked by {0}; remove the lock file if no other command is running")]
    Locked(PathBuf),
    #[error("bad latency table {path}: {msg}")]
    BadTable { path: PathBuf, msg: String },
    #[error("bad architecture file {path}: {msg}")]
    BadArchitecture { path: PathBuf, msg: String },
    #[error("bad weights file {path}: {msg}")]
    BadWeights { path: PathBuf, msg: String },
    #[error("bad {what} {path}: {msg}")]
    BadArtifact {
        what: &'static str,
        path: PathBuf,
        msg: String,
    },
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(hypercell_core::Error),
}

impl CliError {
    /// Process exit code. 2 is left to argument parsing.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(_) => 1,
            CliError::Config(_) => 3,
            CliError::MissingArtifact { .. } => 4,
            CliError::HashMismatch { .. } => 5,
            CliError::Exists(_) => 6,
            CliError::Locked(_) => 7,
            CliError::BadTable { .. } => 8,
            CliError::BadArchitecture { .. } => 9,
            CliError::BadWeights { .. } => 10,
            CliError::BadArtifact { .. } => 11,
            CliError::Io { .. } => 12,
            CliError::Numeric(_) => 13,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<hypercell_core::Error> for CliError {
    fn from(e: hypercell_core::Error) -> Self {
        use hypercell_core::Error as E;
        match e {
            E::InvalidConfig { .. } => CliError::Config(e.to_string()),
            E::NonFinite(_) => CliError::Numeric(e.to_string()),
            other => CliError::Core(other),
        }
    }
}
