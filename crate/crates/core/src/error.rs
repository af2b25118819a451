// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every layer of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("tokenization error: {0}")]
    Tokenize(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("unknown hook name `{0}`")]
    UnknownHook(String),

    #[error("hook `{hook}` expects shape {expected:?}, got {got:?}")]
    HookShape {
        hook: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("safetensors: {0}")]
    Safetensors(String),

    #[error("missing checkpoint parameter `{0}`")]
    MissingParameter(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("perturbation error: {0}")]
    Perturb(String),

    #[error("patching error: {0}")]
    Patch(String),

    #[error("experiment config error at `{field}`: {msg}")]
    ExperimentConfig { field: String, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
