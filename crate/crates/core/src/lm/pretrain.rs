//! Next-token pretraining with AdamW, warmup and cosine decay.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{Lm, LmConfig, LmError};
use super::vocab::TokenId;
use crate::adapt::optimizer::{optimizer_step, OptimizerKind, OptimizerParams, OptimizerState};
use crate::tensor::{clip_global_norm, TensorError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
    /// Fraction of documents (taken from the end) held out for evaluation.
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 3e-3,
            batch_size: 8,
            warmup_steps: 50,
            clip_norm: 1.0,
            weight_decay: 0.01,
            heldout_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("corpus has no sequence of at least two tokens")]
    EmptyCorpus,
    #[error("loss became non-finite at step {step}; trace of the last losses: {trace:?}")]
    Diverged { step: usize, trace: Vec<f64> },
    #[error(transparent)]
    Model(#[from] LmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean training loss per step.
    pub losses: Vec<f64>,
    /// Token-weighted next-token loss on the held-out documents, before and
    /// after training.
    pub heldout_initial: f64,
    pub heldout_final: f64,
    pub train_docs: usize,
    pub heldout_docs: usize,
}

fn lr_at(cfg: &PretrainConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup_steps).max(1) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.lr * (0.1 + 0.9 * cosine)
}

/// Cuts a random window of at most `context + 1` tokens so that the input
/// part fits the model.
fn window<'a>(doc: &'a [TokenId], context: usize, rng: &mut ChaCha8Rng) -> &'a [TokenId] {
    if doc.len() <= context + 1 {
        return doc;
    }
    let start = rng.gen_range(0..=doc.len() - (context + 1));
    &doc[start..start + context + 1]
}

/// Token-weighted mean next-token loss over `docs`, each truncated to the
/// context.
pub fn sequence_loss(lm: &Lm, docs: &[Vec<TokenId>]) -> Result<f64, LmError> {
    let context = lm.config().context_len;
    let mut total = 0.0;
    let mut count = 0usize;
    for doc in docs.iter().filter(|d| d.len() >= 2) {
        let doc = &doc[..doc.len().min(context + 1)];
        let n = doc.len() - 1;
        let mask = vec![true; n];
        total += lm.masked_loss(&doc[..n], &doc[1..], &mask)? * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(LmError::EmptyInput);
    }
    Ok(total / count as f64)
}

/// Splits `docs` into train and held-out parts (the held-out slice is the
/// tail), trains a fresh model from `lm_config`, and reports losses.
pub fn pretrain(
    docs: &[Vec<TokenId>],
    lm_config: LmConfig,
    cfg: &PretrainConfig,
) -> Result<(Lm, PretrainReport), PretrainError> {
    let usable: Vec<Vec<TokenId>> = docs.iter().filter(|d| d.len() >= 2).cloned().collect();
    if usable.is_empty() {
        return Err(PretrainError::EmptyCorpus);
    }
    let n_heldout = if usable.len() >= 2 {
        ((usable.len() as f64 * cfg.heldout_fraction).round() as usize).clamp(1, usable.len() - 1)
    } else {
        0
    };
    let (train, heldout) = usable.split_at(usable.len() - n_heldout);
    let heldout_eval = &heldout[..heldout.len().min(256)];
    let mut lm = Lm::new(lm_config)?;
    let heldout_initial = if heldout_eval.is_empty() {
        f64::NAN
    } else {
        sequence_loss(&lm, heldout_eval)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(lm.params());
    let mut losses = Vec::with_capacity(cfg.steps);
    let batch = cfg.batch_size.max(1);
    let context = lm.config().context_len;
    for step in 0..cfg.steps {
        lm.zero_grad();
        let mut step_loss = 0.0;
        for _ in 0..batch {
            let doc = &train[rng.gen_range(0..train.len())];
            let seq = window(doc, context, &mut rng);
            step_loss += lm.train_step_loss(seq, 1.0 / batch as f64)?;
        }
        step_loss /= batch as f64;
        losses.push(step_loss);
        if !step_loss.is_finite() {
            let from = losses.len().saturating_sub(20);
            return Err(PretrainError::Diverged {
                step,
                trace: losses[from..].to_vec(),
            });
        }
        let hp = OptimizerParams {
            kind: OptimizerKind::Adamw,
            lr: lr_at(cfg, step),
            weight_decay: cfg.weight_decay,
            ..OptimizerParams::default()
        };
        clip_global_norm(lm.params_mut(), cfg.clip_norm)?;
        optimizer_step(lm.params_mut(), &mut state, &hp)?;
    }
    lm.zero_grad();
    let heldout_final = if heldout_eval.is_empty() {
        f64::NAN
    } else {
        sequence_loss(&lm, heldout_eval)?
    };
    Ok((
        lm,
        PretrainReport {
            losses,
            heldout_initial,
            heldout_final,
            train_docs: train.len(),
            heldout_docs: heldout.len(),
        },
    ))
}
