//! File formats and commands behind the `crossfuse` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod io;
pub mod report;

use std::fmt;

/// Process exit status for each failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Numerical = 3,
}

/// An error tagged with the exit status it maps to.
#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: ExitKind::Usage,
            error: error.into(),
        }
    }

    pub fn data(error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: ExitKind::Data,
            error: error.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl std::error::Error for CliError {}

impl From<crossfuse_core::Error> for CliError {
    fn from(e: crossfuse_core::Error) -> Self {
        use crossfuse_core::Error as E;
        let kind = match e {
            E::Diverged(_) | E::NonFinite(_) => ExitKind::Numerical,
            E::Config(_) => ExitKind::Usage,
            _ => ExitKind::Data,
        };
        Self { kind, error: e.into() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Attaches context to an error while keeping its exit status.
pub(crate) trait Context<T> {
    fn ctx(self, msg: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T, E: Into<CliError>> Context<T> for std::result::Result<T, E> {
    fn ctx(self, msg: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| {
            let e = e.into();
            CliError {
                kind: e.kind,
                error: e.error.context(msg()),
            }
        })
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e)
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        Self::data(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::data(e)
    }
}
