use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite input to {0}")]
    NumericInput(&'static str),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocabulary { id: u32, vocab: usize },
    #[error("sequence of length {len} exceeds the limit of {limit} tokens")]
    Truncation { len: usize, limit: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("LoRA rank {rank} must lie in 1..={max}")]
    Rank { rank: usize, max: usize },
    #[error("adapter already merged into its base weight")]
    AlreadyMerged,
    #[error("enumeration of {required} sequences exceeds the capacity of {limit}")]
    Capacity { required: u128, limit: u128 },
    #[error("non-finite gradient in parameter `{0}`")]
    NanGradient(String),
    #[error("non-finite loss at step {step}")]
    NanLoss { step: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("vote for unknown pair `{0}`")]
    OrphanVote(String),
    #[error("invalid UTF-8 after byte {valid_up_to}")]
    Encoding { valid_up_to: usize },
}
