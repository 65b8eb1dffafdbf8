use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is at or below the degenerate threshold")]
    DegenerateNorm { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("function evaluated to a non-finite value at coordinate {coord}")]
    NonFiniteEvaluation { coord: usize },

    #[error("requested {requested} distinct items but the schema only has {available} combinations")]
    WorldTooSmall { requested: usize, available: usize },

    #[error("query {query}: could only find {found} of {requested} shortcut distractors")]
    InsufficientDistractors { query: usize, found: usize, requested: usize },

    #[error("benchmark needs {needed} gallery entries but gallery_size is {gallery_size}")]
    GalleryTooSmall { needed: usize, gallery_size: usize },

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("prompt contains a pseudo-token slot but no pseudo vector was supplied")]
    MissingPseudo,

    #[error("sequence of {len} tokens exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("corrupt tensor data: {0}")]
    CorruptTensor(String),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("transition proxy norm {norm:e} is degenerate")]
    DegenerateDelta { norm: f64 },

    #[error("every tuple in the batch has a degenerate transition proxy")]
    DegenerateBatch,

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("candidate set for query {query} is invalid: {reason}")]
    CandidateSetInvalid { query: usize, reason: String },

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("artifact {} was produced under config {found}, expected {expected}", .path.display())]
    MixedConfig { path: PathBuf, expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
