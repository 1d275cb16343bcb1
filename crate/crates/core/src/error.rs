use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can surface.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("batch norm in train mode needs at least 2 rows, got {rows}")]
    DegenerateBatch { rows: usize },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("non-finite {component} loss")]
    NonFiniteLoss { component: &'static str },

    #[error("missing prototype for class {class}")]
    MissingPrototype { class: usize },

    #[error("empty domain: {0}")]
    EmptyDomain(&'static str),

    #[error("clustering infeasible: {clusters} clusters for {samples} samples")]
    InfeasibleClustering { clusters: usize, samples: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("format error in {path}:{line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("fold {fold} ({target}): {source}")]
    Fold {
        fold: usize,
        target: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Dimension {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// Failure class used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Compatibility(_) => ErrorKind::Config,
            Error::Label { .. }
            | Error::Protocol(_)
            | Error::Format { .. }
            | Error::EmptyDomain(_)
            | Error::InfeasibleClustering { .. } => ErrorKind::Data,
            Error::Dimension { .. }
            | Error::DegenerateBatch { .. }
            | Error::NonFiniteGradient { .. }
            | Error::NonFiniteLoss { .. }
            | Error::MissingPrototype { .. } => ErrorKind::Numeric,
            Error::File { .. } => ErrorKind::Io,
            Error::Fold { source, .. } => source.kind(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Io,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
            ErrorKind::Io => 5,
        }
    }
}
