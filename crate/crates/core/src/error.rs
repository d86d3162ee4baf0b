use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied inputs that violate an operation's preconditions.
    #[error("input error: {0}")]
    Input(String),

    /// Tensor shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// No non-empty eroded segment is available as a fake patch candidate.
    #[error("no candidate patches")]
    NoCandidates,

    /// A loss component became non-finite during training.
    #[error("non-finite {component} loss at step {step}: {value}")]
    NonFinite { component: String, step: usize, value: f64 },

    /// A file on disk is corrupt, truncated or of an unknown version.
    #[error("load error in {}: {reason}", path.display())]
    Load { path: PathBuf, reason: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load { path: path.into(), reason: reason.into() }
    }
}
