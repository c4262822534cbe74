use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every stage of the localization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed input file. `position` is a byte offset or line number, as described.
    #[error("parse error in {what} at {position}: {message}")]
    Parse {
        what: &'static str,
        position: String,
        message: String,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("missing ground truth for query {0}")]
    MissingGroundTruth(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: &'static str, position: impl ToString, message: impl ToString) -> Self {
        Error::Parse {
            what,
            position: position.to_string(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by bad user input (files, parameters) rather than
    /// by a stage failing on valid input.
    pub fn is_invalid_input(&self) -> bool {
        match self {
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::InvalidParameter(_)
            | Error::Json(_)
            | Error::DimensionMismatch { .. }
            | Error::MissingGroundTruth(_) => true,
            Error::Stage { source, .. } => source.is_invalid_input(),
            Error::Precondition(_) | Error::Degenerate(_) => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
