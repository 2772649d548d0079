use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range [0, {bound}) in {op}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("sequence length {len} exceeds limit {limit}")]
    Length { len: usize, limit: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("freeze violation on parameter `{name}` during epoch {epoch}")]
    FreezeViolation { name: String, epoch: usize },

    #[error("loss diverged (non-finite) at step {step}")]
    Divergence { step: usize },

    #[error("updated-parameter ledger mismatch at epoch {epoch}: instrumented {observed}, predicted {predicted}")]
    LedgerMismatch {
        epoch: usize,
        observed: u64,
        predicted: u64,
    },

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("bad checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
