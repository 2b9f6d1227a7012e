use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to parse {}: {message}", location(.episode))]
    Parse {
        episode: Option<usize>,
        message: String,
    },
    #[error("invalid episode {episode}: {message}")]
    Validation { episode: String, message: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("class {0:?} has zero support")]
    ZeroSupport(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("{} utterances have no embedding (first: {})", .0.len(), .0.first().map(String::as_str).unwrap_or("-"))]
    MissingEmbeddings(Vec<String>),
    #[error("encoder failed: {0}")]
    Encoder(String),
    #[error("encoder failed ({cause}); {} utterances remain unembedded (first: {})", .missing.len(), .missing.first().map(String::as_str).unwrap_or("-"))]
    EncoderUnavailable { cause: String, missing: Vec<String> },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("bad cache file {path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn location(episode: &Option<usize>) -> String {
    match episode {
        Some(i) => format!("episode #{i}"),
        None => "document".to_string(),
    }
}

impl Error {
    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation { .. }
                | Error::Invalid(_)
                | Error::UnknownLabel(_)
                | Error::ZeroSupport(_)
                | Error::DimMismatch { .. }
                | Error::Json(_)
        )
    }
}
