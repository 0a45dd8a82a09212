//! Preference-alignment core: a small reverse-mode autodiff engine, a
//! byte-level decoder-only language model, LoRA adapters, the DPO objective
//! with its enumeration oracles, training loops, and the statistics behind
//! pairwise human evaluation.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, networking and
//! the command line live in the `humanlike` companion crate.

#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod arena;
pub mod autodiff;
pub mod data;
pub mod dpo;
mod error;
pub mod lm;
pub mod lora;
pub mod math;
pub mod param;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

/// The seeded generator used for every source of randomness in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Whether a forward pass is for training (stochastic layers active, drawing
/// from the given generator) or evaluation.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}
