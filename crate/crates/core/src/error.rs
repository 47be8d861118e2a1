use thiserror::Error;

/// Crate-wide error type. Numerical faults (non-finite values, shape
/// mismatches) are surfaced as errors rather than silently propagated.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} elements")]
    BadShape { shape: Vec<usize>, len: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward invoked twice on the same tape")]
    BackwardTwice,

    #[error("kernel {kernel:?} larger than padded input {input:?}")]
    KernelTooLarge {
        kernel: Vec<usize>,
        input: Vec<usize>,
    },

    #[error("{0}")]
    Audio(String),

    #[error("{0}")]
    Feature(String),

    #[error("{0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Training(String),

    #[error("training diverged at epoch {epoch} step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
