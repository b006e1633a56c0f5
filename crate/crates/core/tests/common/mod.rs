//! Reference implementations used as test oracles. Each one is written
//! against the definitions directly and shares no code with the library
//! beyond model evaluation.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use ttarag::lm::{Lm, LmConfig, TokenId, Vocab, SEP};

// ---------------------------------------------------------------- gradients

/// `|a - n| / max(|a|, |n|)`, zero when both vanish.
pub fn relative_error(a: f64, n: f64) -> f64 {
    let d = a.abs().max(n.abs());
    if d == 0.0 {
        0.0
    } else {
        (a - n).abs() / d
    }
}

/// Compares back-propagated gradients of the masked loss with central
/// differences. Returns `(coordinates within tol, coordinates checked)`.
pub fn gradient_agreement(
    lm: &mut Lm,
    input: &[TokenId],
    targets: &[TokenId],
    mask: &[bool],
    h: f64,
    tol: f64,
) -> (usize, usize) {
    lm.zero_grad();
    lm.masked_loss_backward(input, targets, mask, 1.0).unwrap();
    let analytic: Vec<Vec<f64>> = lm
        .params()
        .iter()
        .map(|p| p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    lm.zero_grad();
    let (mut ok, mut total) = (0, 0);
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let x = lm.params()[i].data()[j];
            lm.params_mut()[i].data_mut()[j] = x + h;
            let up = lm.masked_loss(input, targets, mask).unwrap();
            lm.params_mut()[i].data_mut()[j] = x - h;
            let down = lm.masked_loss(input, targets, mask).unwrap();
            lm.params_mut()[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            total += 1;
            if relative_error(a, numeric) <= tol {
                ok += 1;
            }
        }
    }
    (ok, total)
}

// ------------------------------------------------------------ suffix losses

/// Query, separator, prefix and suffix ids, and where the suffix starts.
pub fn pair_sequence(vocab: &Vocab, query: &str, prefix: &str, suffix: &str) -> (Vec<TokenId>, usize) {
    let mut seq = vocab.encode(query);
    seq.push(SEP);
    seq.extend(vocab.encode(prefix));
    let start = seq.len();
    seq.extend(vocab.encode(suffix));
    (seq, start)
}

/// Mean of `-log softmax(logits)[next]` over the suffix tokens only,
/// computed from raw logits.
pub fn suffix_cross_entropy(lm: &Lm, seq: &[TokenId], suffix_start: usize) -> f64 {
    let logits = lm.logits(&seq[..seq.len() - 1]).unwrap();
    let v = logits.cols();
    let mut sum = 0.0;
    for pos in suffix_start..seq.len() {
        let row = &logits.data()[(pos - 1) * v..pos * v];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        sum += lse - row[seq[pos]];
    }
    sum / (seq.len() - suffix_start) as f64
}

// ------------------------------------------------------------------- models

pub fn copy_model(lm: &Lm) -> Lm {
    Lm::from_snapshot(*lm.config(), &lm.snapshot()).unwrap()
}

/// A random small configuration; `max_params` bounds the parameter count.
pub fn random_config<R: Rng>(rng: &mut R, vocab_size: usize, max_params: usize) -> LmConfig {
    loop {
        let heads = [1, 2][rng.gen_range(0..2)];
        let cfg = LmConfig {
            vocab_size,
            embed_dim: heads * rng.gen_range(2..=8),
            layers: rng.gen_range(1..=2),
            heads,
            context_len: 32,
            seed: rng.gen(),
            tied_embeddings: rng.gen_bool(0.5),
        };
        if Lm::new(cfg).unwrap().num_params() <= max_params {
            return cfg;
        }
    }
}

pub const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "ru", "te", "sa", "po", "ne", "vi", "du", "ga", "fe"];

pub fn random_word<R: Rng>(rng: &mut R) -> String {
    (0..rng.gen_range(1..=3)).map(|_| *SYLLABLES.choose(rng).unwrap()).collect()
}

pub fn random_sentence<R: Rng>(rng: &mut R, words: std::ops::Range<usize>) -> String {
    let n = rng.gen_range(words);
    (0..n).map(|_| random_word(rng)).collect::<Vec<_>>().join(" ")
}

// ----------------------------------------------------------------- splitter

const MARKS: &str = ".,;:!?";

/// The split rule, as a plain loop: the first word (1-based position `c`)
/// whose final character is a mark with `c >= 3` and `n - c >= 3` words
/// after it, otherwise `n / 2`. `None` below six words. The boolean is true
/// for a punctuation split.
pub fn reference_split(text: &str) -> Option<(String, String, bool)> {
    let mut words: Vec<String> = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    let n = words.len();
    if n < 6 {
        return None;
    }
    let mut cut = None;
    for (i, w) in words.iter().enumerate() {
        let last = w.chars().last().unwrap();
        let c = i + 1;
        if MARKS.contains(last) && c >= 3 && n - c >= 3 {
            cut = Some(c);
            break;
        }
    }
    let punct = cut.is_some();
    let c = cut.unwrap_or(n / 2);
    Some((words[..c].join(" "), words[c..].join(" "), punct))
}

/// Passages mixing plain words, trailing marks, marks that do not split,
/// bare punctuation tokens and irregular whitespace.
pub fn random_passage<R: Rng>(rng: &mut R) -> String {
    let n = rng.gen_range(0..=24);
    let mut out = String::new();
    for i in 0..n {
        if i > 0 || rng.gen_bool(0.1) {
            out.push_str([" ", " ", " ", "  ", "\t", "\n", " \u{a0}"][rng.gen_range(0..7)]);
        }
        let roll: f64 = rng.gen();
        if roll < 0.05 {
            out.push_str(["-", ",", ".", "\"", "..."][rng.gen_range(0..5)]);
            continue;
        }
        if rng.gen_bool(0.1) {
            out.push('(');
        }
        out.push_str(&random_word(rng));
        if rng.gen_bool(0.05) {
            out.push('é');
        }
        if rng.gen_bool(0.25) {
            out.push(MARKS.chars().nth(rng.gen_range(0..MARKS.len())).unwrap());
        }
        if rng.gen_bool(0.05) {
            out.push_str([")", "'", "\"", "-"][rng.gen_range(0..4)]);
        }
    }
    if rng.gen_bool(0.1) {
        out.push_str("  \n");
    }
    out
}

// --------------------------------------------------------------------- BM25

/// Okapi BM25 of every document, straight from the token lists. Documents
/// are `(id, lowercase whitespace-separated text)`.
pub fn brute_force_bm25(docs: &[(String, String)], query: &[String], k1: f64, b: f64) -> Vec<(String, f64)> {
    let toks: Vec<Vec<&str>> = docs.iter().map(|(_, t)| t.split_whitespace().collect()).collect();
    let n = docs.len() as f64;
    let avgdl = toks.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let df = |term: &str| toks.iter().filter(|d| d.contains(&term)).count() as f64;
    let mut scores = Vec::new();
    for ((id, _), d) in docs.iter().zip(&toks) {
        let mut s = 0.0;
        for q in query {
            let tf = d.iter().filter(|w| **w == q.as_str()).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let dfq = df(q);
            let idf = ((n - dfq + 0.5) / (dfq + 0.5)).ln_1p();
            s += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * d.len() as f64 / avgdl));
        }
        scores.push((id.clone(), s));
    }
    scores
}

/// Top `k` by score, then id, positive scores only.
pub fn rank(mut scores: Vec<(String, f64)>, k: usize) -> Vec<(String, f64)> {
    scores.retain(|(_, s)| *s > 0.0);
    scores.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scores.truncate(k);
    scores
}

/// A random corpus of up to `max_docs` documents over a small vocabulary,
/// with shuffled ids and a few exact duplicates to force ties.
pub fn random_corpus<R: Rng>(rng: &mut R, max_docs: usize) -> (Vec<(String, String)>, Vec<String>) {
    let vocab: Vec<String> = (0..rng.gen_range(2..40)).map(|i| format!("w{i}")).collect();
    let n = rng.gen_range(1..=max_docs);
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    let mut docs: Vec<(String, String)> = Vec::with_capacity(n);
    for id in ids {
        let text = if !docs.is_empty() && rng.gen_bool(0.05) {
            docs[rng.gen_range(0..docs.len())].1.clone()
        } else {
            let len = rng.gen_range(0..30);
            (0..len).map(|_| vocab.choose(rng).unwrap().as_str()).collect::<Vec<_>>().join(" ")
        };
        docs.push((format!("doc-{id:03}"), text));
    }
    (docs, vocab)
}
