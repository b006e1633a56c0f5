//! The adaptable generator: tokenizer, transformer, checkpoints and
//! pretraining.

pub mod checkpoint;
pub mod model;
pub mod pretrain;
pub mod vocab;

pub use model::{argmax, Lm, LmConfig, LmError, ParameterSnapshot};
pub use vocab::{tokenize, TokenId, Vocab, VocabError, EOS, PAD, SEP, UNK};
