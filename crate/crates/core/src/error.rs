use std::io;

use thiserror::Error;

/// Errors raised while reading a tensor container file.
#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: expected PDISENT1")]
    BadMagic,
    #[error("truncated file while reading {0}")]
    Truncated(String),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("array `{name}` missing")]
    MissingArray { name: String },
    #[error("array `{name}` has dtype {found}, expected {expected}")]
    WrongDtype {
        name: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("array `{name}` has shape {found:?}, expected {expected:?}")]
    WrongShape { name: String, expected: Vec<usize>, found: Vec<usize> },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite gradient in tensor `{tensor}` at step {step}")]
    NonFiniteGradient { tensor: String, step: u64 },
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("identity {0} has insufficient frontal samples")]
    InsufficientFrontal(u32),
    #[error("no identity has both near-frontal and non-frontal samples")]
    NoPairableIdentity,
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
