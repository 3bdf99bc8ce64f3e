use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("code {code} does not fit in {bits} bits")]
    Encoding { code: u32, bits: u8 },

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("unknown relation `{0}` in strict mode")]
    UnknownRelation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot sample a negative for user {0}: every item is a positive")]
    Sampling(usize),

    #[error("{0}")]
    Usage(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
