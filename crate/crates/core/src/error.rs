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
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("backpropagate needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("index {index} out of range for {what} of size {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("label {label} outside [1, {classes}]")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("step {step} outside [1, {steps}]")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("rank {rank} exceeds min(in, out) = {limit} for layer `{layer}`")]
    RankTooLarge {
        layer: String,
        rank: usize,
        limit: usize,
    },
    #[error("layer `{0}` already carries an adapter")]
    AlreadyAdapted(String),
    #[error("model has no adapters attached")]
    NoAdapters,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
