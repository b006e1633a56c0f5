//! Retrieval-augmented question answering with per-query test-time
//! adaptation of a small causal language model.

pub mod adapt;
pub mod autograd;
pub mod context;
pub mod eval;
pub mod lm;
pub mod pipeline;
pub mod retrieval;
pub mod tensor;
