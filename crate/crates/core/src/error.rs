use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("backward already ran on this tape; reset gradients first")]
    DoubleBackward,

    #[error("invalid quantizer spec: {0}")]
    Spec(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("index {index} out of range [{lo}, {hi}] ({what})")]
    Index {
        what: &'static str,
        index: usize,
        lo: usize,
        hi: usize,
    },

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown configuration key `{key}` (known keys: {known})")]
    UnknownKey { key: String, known: String },

    #[error("degenerate labels: {0}")]
    Labels(String),

    #[error("guidance failed at diffusion step {step}: {reason}")]
    Guidance { step: usize, reason: String },

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("incompatible checkpoint version {found} (expected {expected})")]
    Version { found: u8, expected: u8 },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
