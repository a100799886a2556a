use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGrad { name: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("crop {out_h}x{out_w} does not fit input {in_h}x{in_w}")]
    CropTooLarge { in_h: usize, in_w: usize, out_h: usize, out_w: usize },
    #[error("encoder expects {expected_h}x{expected_w} input, got {got_h}x{got_w}")]
    WrongInputSize { expected_h: usize, expected_w: usize, got_h: usize, got_w: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("replay buffer holds {fill} transitions, need at least {required}")]
    NotEnoughSamples { fill: usize, required: usize },
    #[error("action {action} out of range for {num_actions} discrete actions")]
    InvalidAction { action: usize, num_actions: usize },
    #[error("conflicting flags: {0}")]
    ConflictingFlags(&'static str),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
