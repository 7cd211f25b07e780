use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated input at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },

    #[error("duplicate embedding id {0}")]
    DuplicateId(u64),

    #[error("phase order error: expected checkpoint in phase {expected}, found {found}")]
    PhaseOrder { expected: String, found: String },

    #[error("training diverged in phase {phase} at step {step}: loss is not finite")]
    Divergence { phase: char, step: usize },

    #[error("non-finite gradient for parameter {0}")]
    NanGradient(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used to map failures onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::PhaseOrder { .. } | Error::Json(_) => ErrorClass::Config,
            Error::Io(_)
            | Error::Format(_)
            | Error::Version { .. }
            | Error::Truncated { .. }
            | Error::DuplicateId(_) => ErrorClass::Io,
            Error::Shape(_)
            | Error::NonFinite(_)
            | Error::Degenerate(_)
            | Error::Contract(_)
            | Error::EmptyBatch
            | Error::Divergence { .. }
            | Error::NanGradient(_) => ErrorClass::Numeric,
        }
    }
}
