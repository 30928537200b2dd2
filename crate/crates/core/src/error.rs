use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("grid {height}x{width} is not divisible by ratio {ratio}")]
    Divisibility {
        height: usize,
        width: usize,
        ratio: usize,
    },

    #[error("{channels} channels are not divisible by ratio^2 = {}", ratio * ratio)]
    ChannelDivisibility { channels: usize, ratio: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("conflicting settings: {0}")]
    Conflict(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("assertion failed: {0}")]
    Assertion(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 1 validation, 2 runtime assertion, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension { .. }
            | Error::Divisibility { .. }
            | Error::ChannelDivisibility { .. }
            | Error::Config(_)
            | Error::UnknownKey(_)
            | Error::Conflict(_) => 1,
            Error::Contract(_)
            | Error::Evaluation(_)
            | Error::NonFiniteLoss { .. }
            | Error::Assertion(_) => 2,
            Error::Io { .. } | Error::Json(_) => 3,
        }
    }
}
