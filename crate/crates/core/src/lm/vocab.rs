//! Word-level vocabulary with punctuation isolated into single-character
//! tokens.
//!
//! Reserved ids are fixed:
//!
//! | id | token   | role                         |
//! |----|---------|------------------------------|
//! | 0  | `<pad>` | padding, never generated     |
//! | 1  | `<unk>` | out-of-vocabulary words      |
//! | 2  | `<eos>` | end of sequence              |
//! | 3  | `<sep>` | query / context separator    |
//!
//! Regular tokens follow in lexicographic order, so the same corpus and
//! `min_freq` always produce the same ids.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;

const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<eos>", "<sep>"];

#[derive(Debug, Error, PartialEq)]
pub enum VocabError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("duplicate token {0:?} in vocabulary listing")]
    DuplicateToken(String),
    #[error("vocabulary listing does not start with the reserved tokens")]
    MissingReserved,
}

/// Splits on whitespace, then breaks every ASCII punctuation character out
/// of each word as its own token.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut start = 0;
        for (i, c) in word.char_indices() {
            if c.is_ascii_punctuation() {
                if start < i {
                    out.push(&word[start..i]);
                }
                out.push(&word[i..i + 1]);
                start = i + 1;
            }
        }
        if start < word.len() {
            out.push(&word[start..]);
        }
    }
    out
}

/// Punctuation that decodes glued to the preceding token.
fn attaches_left(token: &str) -> bool {
    matches!(token, "." | "," | ";" | ":" | "!" | "?")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from every document in `corpus`, keeping tokens
    /// seen at least `min_freq` times (a threshold of 0 behaves like 1).
    pub fn build<'a, I>(corpus: I, min_freq: usize) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut seen_any = false;
        for doc in corpus {
            for tok in tokenize(doc) {
                seen_any = true;
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(VocabError::EmptyCorpus);
        }
        let min_freq = min_freq.max(1);
        let kept = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_freq)
            .map(|(t, _)| t.to_string());
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).chain(kept).collect())
    }

    /// Rebuilds a vocabulary from its id-ordered token listing, as stored in
    /// checkpoints.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(VocabError::MissingReserved);
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(VocabError::DuplicateToken(t.clone()));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text)
            .into_iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Joins tokens with single spaces, gluing sentence punctuation to the
    /// previous token. Padding is dropped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == PAD {
                continue;
            }
            let tok = self.token(id).unwrap_or(RESERVED[UNK]);
            if !out.is_empty() && !attaches_left(tok) {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_isolates_punctuation() {
        assert_eq!(tokenize("a b. a"), ["a", "b", ".", "a"]);
        assert_eq!(tokenize("  what's up?\n"), ["what", "'", "s", "up", "?"]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn build_keeps_everything_at_min_freq_one() {
        let v = Vocab::build(["a b. a"], 1).unwrap();
        assert_eq!(v.tokens()[4..], [".", "a", "b"]);
        assert_eq!(v.len(), 7);
        assert_eq!(&v.tokens()[..4], &RESERVED);
    }

    #[test]
    fn build_drops_rare_tokens() {
        let v = Vocab::build(["a b. a"], 2).unwrap();
        assert_eq!(v.tokens()[4..], ["a"]);
        assert_eq!(v.encode("b"), [UNK]);
        assert_eq!(v.encode("a"), [v.id("a").unwrap()]);
    }

    #[test]
    fn build_rejects_empty_corpus() {
        assert_eq!(Vocab::build([""], 1), Err(VocabError::EmptyCorpus));
        assert_eq!(Vocab::build(["  \n"], 1), Err(VocabError::EmptyCorpus));
        assert_eq!(Vocab::build(std::iter::empty(), 1), Err(VocabError::EmptyCorpus));
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocab::build(["Paris is the capital of France, and it is known."], 1).unwrap();
        assert!(v.encode("").is_empty());
        let s = "Paris is the capital of France, and it is known.";
        assert_eq!(v.decode(&v.encode(s)), s);
        assert_eq!(v.decode(&v.encode("  Paris   is\tknown ")), "Paris is known");
        assert_eq!(v.encode("Paris is Rome"), [v.id("Paris").unwrap(), v.id("is").unwrap(), UNK]);
        assert_eq!(v.decode(&v.encode("Paris is Rome")), "Paris is <unk>");
    }

    #[test]
    fn from_tokens_validates() {
        let v = Vocab::build(["x y"], 1).unwrap();
        assert_eq!(Vocab::from_tokens(v.tokens().to_vec()).unwrap(), v);
        assert_eq!(
            Vocab::from_tokens(vec!["x".into()]),
            Err(VocabError::MissingReserved)
        );
        let mut dup = v.tokens().to_vec();
        dup.push("x".into());
        assert_eq!(Vocab::from_tokens(dup), Err(VocabError::DuplicateToken("x".into())));
    }
}
