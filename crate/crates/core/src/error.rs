use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes. The CLI maps these onto its exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// A required input is missing or unreadable.
    Input,
    /// Shape, dimension or file-format violation.
    Format,
    /// Numerical failure (rank deficiency, divergence, degenerate data).
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing input: {path}: {source}")]
    MissingInput {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid gradient table: {0}")]
    InvalidScheme(String),

    #[error("non-unit direction (norm {norm})")]
    NonUnitVector { norm: f64 },

    #[error("requested {requested} directions but only {available} diffusion-weighted entries exist")]
    NotEnoughDirections { requested: usize, available: usize },

    #[error("nonpositive signal at entry {index}")]
    NonpositiveSignal { index: usize },

    #[error("rank-deficient design matrix: {0}")]
    RankDeficient(String),

    #[error("unsupported NIfTI file: {0}")]
    UnsupportedFormat(String),

    #[error("truncated data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("value {value} does not fit in {dtype}")]
    Overflow { value: f64, dtype: &'static str },

    #[error("empty mask")]
    EmptyMask,

    #[error("every masked voxel has a degenerate determinant ratio")]
    AllDegenerate,

    #[error("zero dynamic range with differing volumes")]
    ZeroDynamicRange,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("loss diverged at step {step}")]
    Diverged { step: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::MissingInput { .. } | Error::Io(_) => ErrorKind::Input,
            Error::NonpositiveSignal { .. }
            | Error::RankDeficient(_)
            | Error::AllDegenerate
            | Error::NonFinite(_)
            | Error::Diverged { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Format,
        }
    }
}
