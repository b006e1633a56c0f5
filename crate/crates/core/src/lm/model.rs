//! Pre-norm causal transformer over a word-level vocabulary.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::vocab::{TokenId, EOS};
use crate::autograd::{Axis, Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("sequence of {len} tokens exceeds the context length {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("snapshot does not match the model: {0}")]
    SnapshotMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context_len: usize,
    pub seed: u64,
    /// Output projection shares the token embedding table.
    #[serde(default)]
    pub tied_embeddings: bool,
}

impl LmConfig {
    /// Two layers, four heads, 128-dim embeddings, 256-token context.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 128,
            layers: 2,
            heads: 4,
            context_len: 256,
            seed: 0,
            tied_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: &str| Err(LmError::Config(m.to_string()));
        if self.vocab_size == 0 || self.embed_dim == 0 || self.heads == 0 || self.context_len == 0 {
            return bad("vocab_size, embed_dim, heads and context_len must be positive");
        }
        if self.embed_dim % self.heads != 0 {
            return bad("embed_dim must be divisible by heads");
        }
        Ok(())
    }

    fn mlp_dim(&self) -> usize {
        4 * self.embed_dim
    }
}

/// Exact copy of every parameter, in model order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSnapshot {
    pub(crate) generation: u64,
    pub(crate) entries: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl ParameterSnapshot {
    pub fn entries(&self) -> &[(String, Vec<usize>, Vec<f64>)] {
        &self.entries
    }

    /// Generation counter of the model at capture time.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, _, v)| v.len()).sum()
    }
}

struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// The generator. Parameters live in `params`, indexed by the layout built
/// in [`Lm::new`]; every mutable access bumps `generation`.
pub struct Lm {
    config: LmConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    generation: u64,
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
}

impl std::fmt::Debug for Lm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Lm")
            .field("config", &self.config)
            .field("num_params", &self.num_params())
            .field("generation", &self.generation)
            .finish()
    }
}

impl Lm {
    pub fn new(config: LmConfig) -> Result<Self, LmError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let proj_std = std / (2.0 * config.layers.max(1) as f64).sqrt();
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| -> usize {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Normal(s) => {
                    let dist = Normal::new(0.0, s).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                Init::Const(c) => vec![c; n],
            };
            params.push(Tensor::new(shape, data).expect("init shape").with_grad());
            names.push(name);
            params.len() - 1
        };
        let (v, d, h) = (config.vocab_size, config.embed_dim, config.mlp_dim());
        let tok_emb = add("tok_emb".into(), vec![v, d], Init::Normal(std));
        let pos_emb = add("pos_emb".into(), vec![config.context_len, d], Init::Normal(std));
        let layers = (0..config.layers)
            .map(|l| LayerIdx {
                ln1_g: add(format!("layer{l}.ln1.gamma"), vec![d], Init::Const(1.0)),
                ln1_b: add(format!("layer{l}.ln1.beta"), vec![d], Init::Const(0.0)),
                wq: add(format!("layer{l}.attn.wq"), vec![d, d], Init::Normal(std)),
                wk: add(format!("layer{l}.attn.wk"), vec![d, d], Init::Normal(std)),
                wv: add(format!("layer{l}.attn.wv"), vec![d, d], Init::Normal(std)),
                wo: add(format!("layer{l}.attn.wo"), vec![d, d], Init::Normal(proj_std)),
                bo: add(format!("layer{l}.attn.bo"), vec![d], Init::Const(0.0)),
                ln2_g: add(format!("layer{l}.ln2.gamma"), vec![d], Init::Const(1.0)),
                ln2_b: add(format!("layer{l}.ln2.beta"), vec![d], Init::Const(0.0)),
                w1: add(format!("layer{l}.mlp.w1"), vec![d, h], Init::Normal(std)),
                b1: add(format!("layer{l}.mlp.b1"), vec![h], Init::Const(0.0)),
                w2: add(format!("layer{l}.mlp.w2"), vec![h, d], Init::Normal(proj_std)),
                b2: add(format!("layer{l}.mlp.b2"), vec![d], Init::Const(0.0)),
            })
            .collect();
        let lnf_g = add("ln_f.gamma".into(), vec![d], Init::Const(1.0));
        let lnf_b = add("ln_f.beta".into(), vec![d], Init::Const(0.0));
        let head_w = if config.tied_embeddings {
            tok_emb
        } else {
            add("head.w".into(), vec![v, d], Init::Normal(std))
        };
        let head_b = add("head.b".into(), vec![v], Init::Const(0.0));
        Ok(Self {
            config,
            names,
            params,
            generation: 0,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        })
    }

    /// A fresh model with `config`'s layout holding the snapshot's values.
    pub fn from_snapshot(config: LmConfig, snap: &ParameterSnapshot) -> Result<Self, LmError> {
        let mut lm = Self::new(config)?;
        lm.restore(snap)?;
        Ok(lm)
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Mutable parameter access. Counts as a modification for the purposes
    /// of [`Lm::generation`].
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        self.generation += 1;
        &mut self.params
    }

    /// Incremented on every mutable access to the parameters; restored along
    /// with the values by [`Lm::restore`].
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn snapshot(&self) -> ParameterSnapshot {
        ParameterSnapshot {
            generation: self.generation,
            entries: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, p)| (n.clone(), p.shape().to_vec(), p.data().to_vec()))
                .collect(),
        }
    }

    /// Overwrites every parameter with the snapshot's values and drops any
    /// pending gradients. Fails without touching the model if the layout
    /// differs.
    pub fn restore(&mut self, snap: &ParameterSnapshot) -> Result<(), LmError> {
        if snap.entries.len() != self.params.len() {
            return Err(LmError::SnapshotMismatch(format!(
                "{} tensors in snapshot, {} in model",
                snap.entries.len(),
                self.params.len()
            )));
        }
        for ((name, shape, _), (own, p)) in snap.entries.iter().zip(self.names.iter().zip(&self.params)) {
            if name != own || shape.as_slice() != p.shape() {
                return Err(LmError::SnapshotMismatch(format!(
                    "{name} {shape:?} vs {own} {:?}",
                    p.shape()
                )));
            }
        }
        for ((_, _, values), p) in snap.entries.iter().zip(&mut self.params) {
            p.data_mut().copy_from_slice(values);
            p.zero_grad();
        }
        self.generation = snap.generation;
        Ok(())
    }

    /// Records the forward pass on `tape` and returns the `[T x V]` logits.
    pub fn forward(&self, tape: &mut Tape, ids: &[TokenId]) -> Result<Var, LmError> {
        let t = ids.len();
        if t == 0 {
            return Err(LmError::EmptyInput);
        }
        if t > self.config.context_len {
            return Err(LmError::ContextOverflow {
                len: t,
                context: self.config.context_len,
            });
        }
        let p = |tape: &mut Tape, i: usize| tape.param(i, &self.params[i]);
        let d = self.config.embed_dim;
        let heads = self.config.heads;
        let dh = d / heads;

        let tok_table = p(tape, self.tok_emb);
        let tok = tape.embedding(tok_table, ids)?;
        let pos_table = p(tape, self.pos_emb);
        let pos = tape.slice(pos_table, Axis::Rows, 0, t)?;
        let mut x = tape.add(tok, pos)?;

        for l in &self.layers {
            let g = p(tape, l.ln1_g);
            let b = p(tape, l.ln1_b);
            let h = tape.layer_norm(x, g, b)?;
            let wq = p(tape, l.wq);
            let wk = p(tape, l.wk);
            let wv = p(tape, l.wv);
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let mut outs = Vec::with_capacity(heads);
            for head in 0..heads {
                let qh = tape.slice(q, Axis::Cols, head * dh, dh)?;
                let kh = tape.slice(k, Axis::Cols, head * dh, dh)?;
                let vh = tape.slice(v, Axis::Cols, head * dh, dh)?;
                let scores = tape.matmul_t(qh, kh)?;
                let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let att = tape.causal_softmax(scores)?;
                outs.push(tape.matmul(att, vh)?);
            }
            let cat = tape.concat(&outs, Axis::Cols)?;
            let wo = p(tape, l.wo);
            let bo = p(tape, l.bo);
            let proj = tape.matmul(cat, wo)?;
            let proj = tape.add_row(proj, bo)?;
            x = tape.add(x, proj)?;

            let g = p(tape, l.ln2_g);
            let b = p(tape, l.ln2_b);
            let h = tape.layer_norm(x, g, b)?;
            let w1 = p(tape, l.w1);
            let b1 = p(tape, l.b1);
            let w2 = p(tape, l.w2);
            let b2 = p(tape, l.b2);
            let u = tape.matmul(h, w1)?;
            let u = tape.add_row(u, b1)?;
            let u = tape.gelu(u);
            let u = tape.matmul(u, w2)?;
            let u = tape.add_row(u, b2)?;
            x = tape.add(x, u)?;
        }
        let g = p(tape, self.lnf_g);
        let b = p(tape, self.lnf_b);
        let h = tape.layer_norm(x, g, b)?;
        let w = if self.head_w == self.tok_emb { tok_table } else { p(tape, self.head_w) };
        let bias = p(tape, self.head_b);
        let logits = tape.matmul_t(h, w)?;
        Ok(tape.add_row(logits, bias)?)
    }

    /// Logits without keeping the tape.
    pub fn logits(&self, ids: &[TokenId]) -> Result<Tensor, LmError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, ids)?;
        Ok(tape.to_tensor(out))
    }

    /// Mean next-token cross-entropy over positions `1..` of `ids`, with
    /// gradients accumulated into the parameters. Returns the loss value.
    pub fn train_step_loss(&mut self, ids: &[TokenId], weight: f64) -> Result<f64, LmError> {
        if ids.len() < 2 {
            return Err(LmError::EmptyInput);
        }
        let input = &ids[..ids.len() - 1];
        let targets = &ids[1..];
        let mask = vec![true; targets.len()];
        self.masked_loss_backward(input, targets, &mask, weight)
    }

    /// Masked cross-entropy of `targets` given `input`, scaled by `weight`
    /// before back-propagation. Returns the unscaled loss.
    pub fn masked_loss_backward(
        &mut self,
        input: &[TokenId],
        targets: &[TokenId],
        mask: &[bool],
        weight: f64,
    ) -> Result<f64, LmError> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, input)?;
        let loss = tape.masked_cross_entropy(logits, targets, mask)?;
        let value = tape.value(loss)[0];
        let scaled = tape.scale(loss, weight);
        tape.backward(scaled, self.params_mut())?;
        Ok(value)
    }

    /// Masked cross-entropy without touching gradients.
    pub fn masked_loss(&self, input: &[TokenId], targets: &[TokenId], mask: &[bool]) -> Result<f64, LmError> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, input)?;
        let loss = tape.masked_cross_entropy(logits, targets, mask)?;
        Ok(tape.value(loss)[0])
    }

    /// Greedy decoding from the current parameters. Stops after
    /// `max_new_tokens`, at end-of-sequence (not included in the output), or
    /// when the context is full. Ties go to the lowest token id.
    pub fn greedy_generate(&self, prompt: &[TokenId], max_new_tokens: usize) -> Result<Vec<TokenId>, LmError> {
        if prompt.is_empty() {
            return Err(LmError::EmptyInput);
        }
        if prompt.len() > self.config.context_len {
            return Err(LmError::ContextOverflow {
                len: prompt.len(),
                context: self.config.context_len,
            });
        }
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        let v = self.config.vocab_size;
        while out.len() < max_new_tokens && seq.len() < self.config.context_len {
            let logits = self.logits(&seq)?;
            let last = &logits.data()[(seq.len() - 1) * v..seq.len() * v];
            let next = argmax(last);
            if next == EOS {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}

enum Init {
    Normal(f64),
    Const(f64),
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
