//! Test-time adaptation of the generator on self-supervised examples built
//! from retrieved passages.
//!
//! Each example is the token sequence `query <sep> prefix target`; only the
//! `target` positions carry loss. [`adapt`] walks the examples once, in
//! order, back-propagating each. Every `accumulation_steps` examples the
//! summed gradient is divided by the number of examples it holds, clipped to
//! `clip_norm` and handed to the optimizer. A trailing partial group is
//! flushed as a final, smaller update.

pub mod optimizer;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::PrefixSuffixPair;
use crate::lm::{Lm, LmError, ParameterSnapshot, TokenId, Vocab, SEP};
use crate::tensor::{clip_global_norm, global_grad_norm, TensorError};
pub use optimizer::{optimizer_step, OptimizerKind, OptimizerParams, OptimizerState};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("no adaptation examples")]
    NoExamples,
    #[error("example has an empty target after encoding")]
    EmptyTarget,
    #[error("model is not at the pristine snapshot (generation {model} vs {snapshot})")]
    NotPristine { model: u64, snapshot: u64 },
    #[error("non-finite loss at example {index}")]
    NonFiniteLoss { index: usize },
    #[error("invalid adaptation config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] LmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub learning_rate: f64,
    pub accumulation_steps: usize,
    pub pair_budget: usize,
    /// Global L2 threshold for the accumulated gradient. `f64::INFINITY`
    /// disables clipping.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            accumulation_steps: 2,
            pair_budget: 3,
            clip_norm: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            optimizer: OptimizerKind::Adamw,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        let fail = |m: String| Err(AdaptError::Config(m));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.accumulation_steps == 0 {
            return fail("accumulation_steps must be >= 1".into());
        }
        if !(self.clip_norm >= 0.0) {
            return fail(format!("clip_norm must be >= 0, got {}", self.clip_norm));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("epsilon must be > 0 and weight_decay >= 0".into());
        }
        Ok(())
    }

    pub fn optimizer_params(&self) -> OptimizerParams {
        OptimizerParams {
            kind: self.optimizer,
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

/// One training example: `prefix` conditions, `target` is predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptExample {
    pub source_id: String,
    pub prefix: String,
    pub target: String,
}

impl From<&PrefixSuffixPair> for AdaptExample {
    fn from(p: &PrefixSuffixPair) -> Self {
        Self {
            source_id: p.source_id.clone(),
            prefix: p.prefix.clone(),
            target: p.suffix.clone(),
        }
    }
}

impl AdaptExample {
    /// A whole passage as target with no prefix, for the unsegmented
    /// ablation.
    pub fn whole_passage(source_id: &str, text: &str) -> Self {
        Self {
            source_id: source_id.to_string(),
            prefix: String::new(),
            target: text.to_string(),
        }
    }
}

/// Model inputs for one example, shifted for next-token prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub input: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub mask: Vec<bool>,
}

impl EncodedExample {
    pub fn loss_positions(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn encode_example(vocab: &Vocab, query: &str, ex: &AdaptExample) -> Result<EncodedExample, AdaptError> {
    let target = vocab.encode(&ex.target);
    if target.is_empty() {
        return Err(AdaptError::EmptyTarget);
    }
    let mut seq = vocab.encode(query);
    seq.push(SEP);
    seq.extend(vocab.encode(&ex.prefix));
    let conditioning = seq.len();
    seq.extend(target);
    let input = seq[..seq.len() - 1].to_vec();
    let targets = seq[1..].to_vec();
    // targets[i] is seq[i + 1]; it is a target token when i + 1 >= conditioning
    let mask = (0..targets.len()).map(|i| i + 1 >= conditioning).collect();
    Ok(EncodedExample { input, targets, mask })
}

/// `-log P(target | query, prefix)`, averaged over target tokens.
pub fn example_loss(lm: &Lm, vocab: &Vocab, query: &str, ex: &AdaptExample) -> Result<f64, AdaptError> {
    let enc = encode_example(vocab, query, ex)?;
    Ok(lm.masked_loss(&enc.input, &enc.targets, &enc.mask)?)
}

pub fn pair_loss(lm: &Lm, vocab: &Vocab, query: &str, pair: &PrefixSuffixPair) -> Result<f64, AdaptError> {
    example_loss(lm, vocab, query, &pair.into())
}

/// Sum of [`pair_loss`] over `pairs`.
pub fn adaptation_loss(
    lm: &Lm,
    vocab: &Vocab,
    query: &str,
    pairs: &[PrefixSuffixPair],
) -> Result<f64, AdaptError> {
    if pairs.is_empty() {
        return Err(AdaptError::NoExamples);
    }
    pairs.iter().map(|p| pair_loss(lm, vocab, query, p)).sum()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptationTrace {
    /// Loss of each example at the moment it was processed.
    pub example_losses: Vec<f64>,
    /// Norm of the mean accumulated gradient before clipping, per update.
    pub grad_norms: Vec<f64>,
    pub clip_factors: Vec<f64>,
    /// Norm actually handed to the optimizer, per update.
    pub applied_norms: Vec<f64>,
    pub seconds: f64,
}

impl AdaptationTrace {
    pub fn updates(&self) -> usize {
        self.clip_factors.len()
    }
}

/// Adapts `lm` in place on `examples`. The model must currently hold the
/// `pristine` parameters. On failure the pristine parameters are restored
/// before the error is returned.
pub fn adapt(
    lm: &mut Lm,
    pristine: &ParameterSnapshot,
    vocab: &Vocab,
    query: &str,
    examples: &[AdaptExample],
    cfg: &AdaptationConfig,
) -> Result<AdaptationTrace, AdaptError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(AdaptError::NoExamples);
    }
    if lm.generation() != pristine.generation() {
        return Err(AdaptError::NotPristine {
            model: lm.generation(),
            snapshot: pristine.generation(),
        });
    }
    let encoded = examples
        .iter()
        .map(|ex| encode_example(vocab, query, ex))
        .collect::<Result<Vec<_>, _>>()?;
    let result = run_updates(lm, &encoded, cfg);
    if result.is_err() {
        lm.restore(pristine)?;
    }
    result
}

fn run_updates(lm: &mut Lm, encoded: &[EncodedExample], cfg: &AdaptationConfig) -> Result<AdaptationTrace, AdaptError> {
    let start = Instant::now();
    let hp = cfg.optimizer_params();
    let mut state = OptimizerState::new(lm.params());
    let mut trace = AdaptationTrace::default();
    let mut pending = 0usize;
    lm.zero_grad();
    for (index, enc) in encoded.iter().enumerate() {
        let loss = lm.masked_loss_backward(&enc.input, &enc.targets, &enc.mask, 1.0)?;
        if !loss.is_finite() {
            return Err(AdaptError::NonFiniteLoss { index });
        }
        trace.example_losses.push(loss);
        pending += 1;
        if pending == cfg.accumulation_steps || index + 1 == encoded.len() {
            let params = lm.params_mut();
            let inv = 1.0 / pending as f64;
            for g in params.iter_mut().filter_map(|p| p.grad_mut()) {
                g.iter_mut().for_each(|v| *v *= inv);
            }
            trace.grad_norms.push(global_grad_norm(params)?);
            trace.clip_factors.push(clip_global_norm(params, cfg.clip_norm)?);
            trace.applied_norms.push(global_grad_norm(params)?);
            optimizer_step(params, &mut state, &hp)?;
            lm.zero_grad();
            pending = 0;
        }
    }
    trace.seconds = start.elapsed().as_secs_f64();
    Ok(trace)
}
