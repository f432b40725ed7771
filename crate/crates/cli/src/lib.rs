//! Config-driven experiment runner for `qbsde`.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod catalog;
pub mod config;
pub mod runner;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Validation(String),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },
    #[error("{0} acceptance check(s) failed")]
    Check(usize),
    #[error("io: {0}")]
    Io(String),
}

impl CliError {
    pub fn io(what: &str, e: std::io::Error) -> Self {
        CliError::Io(format!("{what}: {e}"))
    }

    /// Process exit status: 2 invalid input, 3 stage failure, 4 failed checks.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Stage { .. } | CliError::Io(_) => 3,
            CliError::Check(_) => 4,
        }
    }
}
