use std::path::PathBuf;

use ffe_flow::FlowError;
use thiserror::Error;

/// Where a malformed file went wrong.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Line(usize),
    Offset(u64),
}

impl std::fmt::Display for Location {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Location::Line(l) => write!(f, "line {l}"),
            Location::Offset(o) => write!(f, "byte offset {o}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{at}: malformed header: {message}")]
    Header { at: Location, message: String },
    #[error("{at}: {message}")]
    Row { at: Location, message: String },
    #[error("{at}: non-finite value in {frame} row {row}")]
    NonFinite {
        at: Location,
        frame: &'static str,
        row: usize,
    },
    #[error("expected {expected} rows, found {found}")]
    RowCount { expected: usize, found: usize },
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("{at}: {message}")]
    Config { at: Location, message: String },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Checkpoint { path: PathBuf, source: FlowError },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 2 for usage and input problems, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_)
            | CliError::Read { .. }
            | CliError::Format { .. }
            | CliError::Checkpoint { .. } => 2,
            CliError::Flow(FlowError::Config(_)) | CliError::Flow(FlowError::Dimension(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<ffe_autodiff::AutodiffError> for CliError {
    fn from(e: ffe_autodiff::AutodiffError) -> Self {
        CliError::Flow(e.into())
    }
}
