use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("empty candidate pool")]
    EmptyPool,
    #[error("training data contains a single class")]
    SingleClass,
    #[error("requested {requested} items but only {available} distinct attribute vectors exist")]
    TooManyItems { requested: u64, available: u64 },
    #[error("learning rates must satisfy policy > discriminator > multiplier, got {0} / {1} / {2}")]
    RateOrdering(f64, f64, f64),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
