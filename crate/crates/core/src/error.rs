use std::path::PathBuf;

use thiserror::Error;

use crate::game::Action;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid deal: {0}")]
    InvalidDeal(String),
    #[error("action {0:?} is not legal in this state")]
    IllegalAction(Action),
    #[error("state is terminal")]
    TerminalState,
    #[error("state is not terminal")]
    NotTerminal,
    #[error("strategy has no entry for information state `{0}`")]
    IncompleteStrategy(String),
    #[error("invalid strategy entry for `{key}`: {reason}")]
    InvalidDistribution { key: String, reason: String },
    #[error("game value has not been computed")]
    MissingGameValue,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("forward trace is stale (parameters changed since the forward pass)")]
    StaleTrace,
    #[error("input projection has width {found}, expected {expected}")]
    WrongInputWidth { expected: usize, found: usize },
    #[error("no legal action to sample")]
    EmptyMask,
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error("unsupported format version `{found}` in {path} (expected `{expected}`)")]
    Version {
        path: String,
        expected: String,
        found: String,
    },
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
