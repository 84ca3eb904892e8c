use std::path::PathBuf;

use thiserror::Error;

/// Error type shared by every stage of the initialization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient control points: need at least {needed}, got {got}")]
    InsufficientControls { needed: usize, got: usize },

    #[error("rank-deficient linear system: {0}")]
    RankDeficient(String),

    #[error("degenerate baseline: all observing cameras share one center")]
    DegenerateBaseline,

    #[error("triangulated point lies at infinity (|w| = {0:e})")]
    PointAtInfinity(f64),

    #[error("unsupported camera model `{model}` at line {line}")]
    UnsupportedCameraModel { model: String, line: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("missing upstream artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    Numerical,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidInput(_)
            | Error::UnsupportedCameraModel { .. }
            | Error::Parse { .. }
            | Error::Format { .. }
            | Error::MissingArtifact(_) => ErrorClass::Input,
            Error::InsufficientControls { .. }
            | Error::RankDeficient(_)
            | Error::DegenerateBaseline
            | Error::PointAtInfinity(_) => ErrorClass::Numerical,
            Error::Io { .. } => ErrorClass::Io,
        }
    }

    /// Process exit code: 2 input/format, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Input => 2,
            ErrorClass::Numerical => 3,
            ErrorClass::Io => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
