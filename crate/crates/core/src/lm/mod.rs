//! Byte-level language model: tokenizer, transformer and sampling.

mod model;
mod sampling;
mod tokenizer;

pub use model::{LanguageModel, ModelConfig, Projection};
pub use sampling::{generate, GenerationParams};
pub use tokenizer::{Tokenizer, BOS, BYTE_TOKENS, EOS, PAD, SEP, VOCAB_SIZE};
