use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A dump or config violates a declared invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Container bytes are malformed (bad magic, truncation, header mismatch).
    #[error("format error: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A kernel evaluation left the finite range of the scalar type.
    #[error("kernel overflow: exp({exponent}) is not finite{hint}")]
    Range { exponent: f64, hint: &'static str },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error(
        "eigensolver did not converge after {sweeps} sweeps \
         (off-diagonal norm {off_norm:e}); try standardizing the keys"
    )]
    NoConvergence { sweeps: usize, off_norm: f64 },

    #[error("{0}")]
    Degenerate(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Wraps the error with a context label such as a dump key.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// Short machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Validation(_) => "validation",
            Error::Format(_) => "format",
            Error::Shape(_) => "shape",
            Error::Range { .. } => "range",
            Error::NonFinite(_) => "non_finite",
            Error::NotSymmetric(_) => "not_symmetric",
            Error::NoConvergence { .. } => "no_convergence",
            Error::Degenerate(_) => "degenerate",
            Error::Context { source, .. } => source.kind(),
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
