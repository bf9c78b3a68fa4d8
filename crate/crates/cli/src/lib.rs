//! Experiment commands behind the `attnreuse` binary.
//!
//! Every command reads a [`RunConfig`], writes a snapshot of the effective
//! configuration to `out_dir/config.toml`, and returns a report that the
//! binary prints.

pub mod commands;
pub mod config;

pub use commands::{
    ablate, analyze, distill, gradcheck, sweep_ratio, AblateReport, AnalyzeReport, DistillReport, GradcheckReport,
    SweepReport, MAX_GRADCHECK_PARAMS,
};
pub use config::RunConfig;

use attnreuse_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 usage/config, 2 numeric failure, 3 validation failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Core(e) => match e {
                CoreError::NonFinite(_) | CoreError::Degenerate(_) => 2,
                CoreError::PatternArity { .. } | CoreError::PatternParse { .. } | CoreError::InvalidPattern(_) => 3,
                _ => 1,
            },
        }
    }
}
