use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain an operation accepts.
    #[error("input out of domain: {0}")]
    InputDomain(String),

    #[error("degenerate ray: direction norm {norm:e} is below 1e-8")]
    DegenerateRay { norm: f64 },

    #[error("degenerate bundle: {0}")]
    DegenerateBundle(String),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("optimization diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("no sign change in the sampled field: empty surface")]
    EmptySurface,

    #[error("mesh is empty")]
    EmptyMesh,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("missing input: {0}")]
    Missing(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
