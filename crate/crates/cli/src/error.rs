//! Error type with stable process exit codes.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or an invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// An upstream artifact has not been produced yet.
    #[error("missing {}; run `mirnet {verb}` first", path.display())]
    Missing { path: PathBuf, verb: &'static str },

    /// Failure while doing the work.
    #[error(transparent)]
    Runtime(#[from] mirnet_core::Error),
}

impl CliError {
    /// 1 for usage and configuration problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Missing { .. } => 1,
            CliError::Runtime(_) => 2,
        }
    }
}
