use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward called before forward on {0}")]
    NoForwardCache(&'static str),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("degenerate embedding: zero-norm vector at row {0}")]
    ZeroNorm(usize),

    #[error("non-unit key at row {row}: norm {norm}")]
    NonUnitKey { row: usize, norm: f64 },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::Invalid(detail.into())
    }
}
