//! File formats, run orchestration and reports for the `flowpath` binary.
//!
//! The numerical work lives in [`flowpath_core`]; this crate adds the
//! configuration document, the checkpoint and sample-dump formats, metrics
//! CSVs and the `train`, `hmc`, `eval`, `compare` and `diagnostics`
//! commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod diag;
pub mod dump;
pub mod metrics;
pub mod report;
pub mod run_target;
pub mod timing;

use std::path::Path;

/// Failure of a command, split by exit code: 2 for usage, configuration
/// and unreadable inputs, 3 for numeric and runtime failures.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    /// Mapper for errors while writing `what`.
    pub fn io(what: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> CliError {
        move |e| CliError::Runtime(format!("cannot write {what}: {e}"))
    }

    /// Mapper for errors while reading the input `path`.
    pub fn read(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |e| CliError::Usage(format!("cannot read {}: {e}", path.display()))
    }
}

impl From<flowpath_core::Error> for CliError {
    fn from(e: flowpath_core::Error) -> Self {
        match e {
            flowpath_core::Error::Usage(m) => CliError::Usage(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
