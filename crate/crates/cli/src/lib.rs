//! The `evb` command-line tool: preprocessing, demand-model pretraining,
//! agent training, evaluation and run reports.

use std::path::{Path, PathBuf};

pub mod commands;
pub mod manifest;
pub mod settings;

pub use commands::{run, Cli};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] evbalance::Error),

    #[error("{path}:{line}: {message}")]
    Config {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Core(evbalance::Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// 2 for bad input or arguments, 3 for numerical divergence.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if !e.is_input_error() => 3,
            _ => 2,
        }
    }
}
