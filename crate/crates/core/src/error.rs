use std::path::PathBuf;

use diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MpaError {
    #[error("scene too crowded: no valid layout after {attempts} placement attempts")]
    SceneTooCrowded { attempts: usize },
    #[error("empty crop: no object points inside the crop window")]
    EmptyCrop,
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("no votes: the scene has no object points")]
    NoVotes,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = MpaError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> MpaError {
    let path = path.into();
    move |source| MpaError::Io { path, source }
}
