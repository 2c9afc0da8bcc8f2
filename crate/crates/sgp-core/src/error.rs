//! Crate-wide error type with a stable mapping to process exit codes.

use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub enum Error {
    /// Shape mismatch between tensors or between a tensor and a module.
    Shape(String),
    /// Invalid operation parameter (stride, rank, threshold out of range, ...).
    Param(String),
    /// Bad configuration: unknown key, infeasible split, missing dataset piece.
    Config(String),
    /// A file exists but its contents do not parse as the expected format.
    Format(String),
    /// Filesystem-level failure.
    Io { path: PathBuf, source: std::io::Error },
    /// NaN loss, failed gradient check, or other numeric breakdown.
    Numerical(String),
    /// Internal contract violated (e.g. prompt token count outside {1,2}).
    Contract(String),
    /// Memory attention invoked with an empty memory set.
    EmptyMemory,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Exit code contract: 2 usage/config, 3 I/O or file format, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Format(_) => 3,
            Error::Shape(_)
            | Error::Param(_)
            | Error::Numerical(_)
            | Error::Contract(_)
            | Error::EmptyMemory => 4,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Param(m) => write!(f, "parameter error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Io { path, source } => write!(f, "io error at {}: {source}", path.display()),
            Error::Numerical(m) => write!(f, "numerical error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::EmptyMemory => write!(
                f,
                "memory attention needs at least one memory entry; \
                 configure a non-empty support set"
            ),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
