// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("template violation: {0}")]
    Template(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("insufficient distractors: {0}")]
    InsufficientDistractors(String),

    /// A pipeline stage needs an artifact an earlier stage should have produced.
    #[error("missing artifact {path} (run stage `{stage}` first)")]
    Dependency { stage: String, path: PathBuf },

    /// Unlearning diverged; the trace written so far is kept for diagnosis.
    #[error("{method} diverged at step {step}: {detail}")]
    Diverged {
        method: String,
        step: usize,
        detail: String,
    },

    /// A pipeline stage failed; the inner error says why.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True when the root cause is a missing prerequisite artifact.
    pub fn is_dependency(&self) -> bool {
        match self {
            Error::Dependency { .. } => true,
            Error::Stage { source, .. } => source.is_dependency(),
            _ => false,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
