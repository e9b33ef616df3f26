use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CrclError>;

#[derive(Debug, Error)]
pub enum CrclError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate column {column} in {which} (norm {norm:e} <= {eps:e})")]
    DegenerateColumn {
        which: &'static str,
        column: usize,
        norm: f64,
        eps: f64,
    },

    #[error("missing labels for {0}")]
    MissingLabels(PathBuf),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("video too short: {frames} frames, need at least {needed}")]
    VideoTooShort { frames: usize, needed: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown key `{0}`")]
    UnknownKey(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("no abnormal frames in test set")]
    NoAbnormalFrames,

    #[error("labels contain a single class")]
    SingleClass,

    #[error("image error: {0}")]
    Image(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CrclError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CrclError::Io { path: path.into(), source }
    }
}
