use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by dataset I/O, validation and the solvers.
#[derive(Debug, Error)]
pub enum PsError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("{0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate lighting: light matrix has rank {rank} < 3")]
    DegenerateLighting { rank: usize },

    #[error("degenerate halfway vector for light {index}: light direction opposes the view")]
    DegenerateHalfway { index: usize },

    #[error("empty mask: no pixels to solve")]
    EmptyMask,

    #[error("non-finite residual or Jacobian at iteration {iteration}")]
    NumericalFailure { iteration: usize },

    #[error("Scherzer constant undefined: consecutive iterates coincide")]
    UndefinedScherzer,
}

pub type Result<T> = std::result::Result<T, PsError>;
