use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("empty manifest")]
    EmptyManifest,

    #[error("malformed manifest row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },

    #[error("category out of range: {category} >= {num_categories} (row {line})")]
    CategoryOutOfRange {
        line: usize,
        category: usize,
        num_categories: usize,
    },

    #[error("duplicate image path {0}")]
    DuplicateImage(String),

    #[error("manifest entry {0} has no category id")]
    MissingCategory(String),

    #[error("zero-sized image {0}")]
    ZeroSized(PathBuf),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("channel mismatch: features have {features} channels, head expects {head}")]
    ChannelMismatch { features: usize, head: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at {context}")]
    NonFiniteLoss { context: String },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("no pseudo labels were produced")]
    NoLabels,

    #[error("no prediction/ground-truth pairs found")]
    NoPairs,

    #[error("{0} is locked by another writer")]
    Locked(PathBuf),

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::result::Result<T, std::io::Error> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}

impl<T> IoContext<T> for std::result::Result<T, image::ImageError> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }
}

impl<T> IoContext<T> for std::result::Result<T, serde_json::Error> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Json {
            path: path.into(),
            source,
        })
    }
}
