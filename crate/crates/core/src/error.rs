use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value {what} at {location}")]
    NumericalDomain { what: String, location: String },

    #[error(
        "regularized Gram matrix is not positive definite (N = {n}, gamma = {gamma:e}); \
         increase gamma or remove duplicate samples"
    )]
    Conditioning { n: usize, gamma: f64 },

    #[error("implicit step matrix I - dt*A is numerically singular at dt = {dt:e}; use a smaller time step")]
    StepSize { dt: f64 },

    #[error("divergence at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed {kind} file {path}: {reason}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the numerics rather than by inputs or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NumericalDomain { .. }
                | Error::Conditioning { .. }
                | Error::StepSize { .. }
                | Error::Divergence { .. }
        )
    }
}

pub(crate) fn check_dims(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "{what}: dimension mismatch (expected {expected}, got {got})"
        )))
    }
}
