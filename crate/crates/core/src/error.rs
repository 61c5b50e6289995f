use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain id {0} (expected 0, 1 or 2)")]
    InvalidDomain(u8),
    #[error("image side {0} must be a power of two and at least 32")]
    InvalidSide(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("checksum mismatch for {0}")]
    Checksum(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("png {path}: {msg}")]
    Png { path: PathBuf, msg: String },
    #[error("unknown architecture {0:?}")]
    UnknownArch(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training: {0}")]
    Training(String),
    #[error("classifier must be frozen before aligner training")]
    ClassifierNotFrozen,
    #[error("results store already holds a row for {0} (use --force to overwrite)")]
    DuplicateRow(String),
    #[error("results store: {0}")]
    Results(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
