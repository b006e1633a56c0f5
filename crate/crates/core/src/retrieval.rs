//! Corpus ingestion and Okapi BM25 ranking.
//!
//! Per query term `t` and document `d`:
//!
//! ```text
//! idf(t)     = ln(1 + (N - df(t) + 0.5) / (df(t) + 0.5))
//! score(t,d) = idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |d| / avgdl))
//! ```
//!
//! Query terms are summed in order, duplicates included. Documents whose
//! total is zero are never returned.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::tokenize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub domain: String,
    pub text: String,
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("duplicate document id {id:?} on lines {first} and {second}")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },
    #[error("unknown document id {0:?}")]
    UnknownId(String),
}

/// A line that could not be parsed as a document record.
#[derive(Debug, Clone, PartialEq)]
pub struct MalformedLine {
    pub line: usize,
    pub reason: String,
}

/// Lowercased word tokens with punctuation-only tokens removed.
pub fn analyze(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !t.chars().all(|c| c.is_ascii_punctuation()))
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DocStats {
    len: usize,
    tf: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    params: Bm25Params,
    docs: Vec<Document>,
    stats: Vec<DocStats>,
    by_id: HashMap<String, usize>,
    df: HashMap<String, usize>,
    postings: HashMap<String, Vec<(usize, usize)>>,
    avgdl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit<'a> {
    pub doc: &'a Document,
    pub score: f64,
}

impl Bm25Index {
    /// Indexes `docs` in order. Ids must be unique; the error names the two
    /// positions (1-based) that collide.
    pub fn build(docs: Vec<Document>, params: Bm25Params) -> Result<Self, RetrievalError> {
        let mut by_id = HashMap::with_capacity(docs.len());
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut postings: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
        let mut stats = Vec::with_capacity(docs.len());
        let mut total_len = 0usize;
        for (i, doc) in docs.iter().enumerate() {
            if let Some(prev) = by_id.insert(doc.id.clone(), i) {
                return Err(RetrievalError::DuplicateId {
                    id: doc.id.clone(),
                    first: prev + 1,
                    second: i + 1,
                });
            }
            let terms = analyze(&doc.text);
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in &terms {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (t, &c) in &tf {
                *df.entry(t.clone()).or_default() += 1;
                postings.entry(t.clone()).or_default().push((i, c));
            }
            total_len += terms.len();
            stats.push(DocStats {
                len: terms.len(),
                tf,
            });
        }
        let avgdl = if docs.is_empty() {
            0.0
        } else {
            total_len as f64 / docs.len() as f64
        };
        Ok(Self {
            params,
            docs,
            stats,
            by_id,
            df,
            postings,
            avgdl,
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(0)
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.docs[i])
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_score(&self, term: &str, tf: usize, doc_len: usize) -> f64 {
        if tf == 0 {
            return 0.0;
        }
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = 1.0 - b + b * doc_len as f64 / self.avgdl;
        self.idf(term) * tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    /// BM25 score of one document for already-analyzed query terms.
    pub fn score(&self, terms: &[String], id: &str) -> Result<f64, RetrievalError> {
        let &i = self
            .by_id
            .get(id)
            .ok_or_else(|| RetrievalError::UnknownId(id.to_string()))?;
        let st = &self.stats[i];
        Ok(terms
            .iter()
            .map(|t| self.term_score(t, st.tf.get(t).copied().unwrap_or(0), st.len))
            .sum())
    }

    /// Top-`k` documents for `query` by descending score, ties broken by
    /// ascending id. Zero-score documents are excluded.
    pub fn retrieve(&self, query: &str, k: usize) -> Vec<Hit<'_>> {
        let terms = analyze(query);
        let mut acc: HashMap<usize, f64> = HashMap::new();
        for t in &terms {
            let Some(list) = self.postings.get(t) else { continue };
            for &(i, tf) in list {
                *acc.entry(i).or_insert(0.0) += self.term_score(t, tf, self.stats[i].len);
            }
        }
        let mut hits: Vec<Hit<'_>> = acc
            .into_iter()
            .filter(|&(_, s)| s > 0.0)
            .map(|(i, score)| Hit {
                doc: &self.docs[i],
                score,
            })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.doc.id.cmp(&b.doc.id)));
        hits.truncate(k);
        hits
    }
}

/// Parses a JSON-lines corpus. Blank lines are skipped; unparsable lines are
/// returned alongside the documents rather than aborting.
pub fn parse_corpus(text: &str) -> Result<(Vec<Document>, Vec<MalformedLine>), RetrievalError> {
    let mut docs = Vec::new();
    let mut bad = Vec::new();
    let mut lines: HashMap<String, usize> = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Document>(line) {
            Ok(doc) => {
                if let Some(&first) = lines.get(&doc.id) {
                    return Err(RetrievalError::DuplicateId {
                        id: doc.id,
                        first,
                        second: line_no,
                    });
                }
                lines.insert(doc.id.clone(), line_no);
                docs.push(doc);
            }
            Err(e) => bad.push(MalformedLine {
                line: line_no,
                reason: e.to_string(),
            }),
        }
    }
    Ok((docs, bad))
}

/// Reads and indexes a corpus file with default BM25 parameters.
pub fn ingest(path: &Path) -> Result<(Bm25Index, Vec<MalformedLine>), RetrievalError> {
    let text = fs::read_to_string(path).map_err(|source| RetrievalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let (docs, bad) = parse_corpus(&text)?;
    Ok((Bm25Index::build(docs, Bm25Params::default())?, bad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, text: &str) -> Document {
        Document {
            id: id.into(),
            domain: "d".into(),
            text: text.into(),
        }
    }

    fn toy() -> Bm25Index {
        Bm25Index::build(
            vec![
                doc("a", "red apple pie"),
                doc("b", "green pear tart"),
                doc("c", "blue plum cake"),
            ],
            Bm25Params::default(),
        )
        .unwrap()
    }

    #[test]
    fn analyze_lowercases_and_drops_punctuation() {
        assert_eq!(analyze("The Cat, sat."), ["the", "cat", "sat"]);
    }

    #[test]
    fn idf_of_singleton_term() {
        let idx = toy();
        let expected = (8.0f64 / 3.0).ln();
        assert!((idx.idf("apple") - expected).abs() < 1e-15);
        assert!((expected - 0.9808).abs() < 1e-4);
    }

    #[test]
    fn absent_term_contributes_zero() {
        let idx = toy();
        let q = vec!["apple".to_string()];
        assert_eq!(idx.score(&q, "b").unwrap(), 0.0);
        assert!(idx.score(&q, "a").unwrap() > 0.0);
        assert!(matches!(idx.score(&q, "zz"), Err(RetrievalError::UnknownId(_))));
    }

    #[test]
    fn equal_length_singleton_score_is_idf() {
        // tf = 1 and |d| = avgdl, so the tf factor is exactly 1
        let idx = toy();
        let s = idx.score(&["pear".into()], "b").unwrap();
        assert!((s - idx.idf("pear")).abs() < 1e-12);
    }

    #[test]
    fn retrieve_orders_and_truncates() {
        let idx = Bm25Index::build(
            vec![
                doc("x2", "cat cat dog"),
                doc("x1", "cat dog"),
                doc("x0", "dog bird"),
                doc("x3", "fish"),
            ],
            Bm25Params::default(),
        )
        .unwrap();
        let all: Vec<&str> = idx.retrieve("cat", 10).iter().map(|h| h.doc.id.as_str()).collect();
        assert_eq!(all, ["x2", "x1"]);
        assert_eq!(idx.retrieve("cat", 1).len(), 1);
        assert!(idx.retrieve("zebra", 5).is_empty());
        assert!(idx.retrieve("", 5).is_empty());
    }

    #[test]
    fn ties_break_by_id() {
        let idx = Bm25Index::build(
            vec![doc("m", "tea cup"), doc("b", "tea pot"), doc("k", "tea mug")],
            Bm25Params::default(),
        )
        .unwrap();
        let ids: Vec<&str> = idx.retrieve("tea", 5).iter().map(|h| h.doc.id.as_str()).collect();
        // every document has df = N, still a positive idf under ln(1 + ..)
        assert_eq!(ids, ["b", "k", "m"]);
    }

    #[test]
    fn duplicate_ids_name_both_lines() {
        let text = "{\"id\":\"a\",\"domain\":\"x\",\"text\":\"one\"}\n\n{\"id\":\"a\",\"domain\":\"x\",\"text\":\"two\"}\n";
        match parse_corpus(text) {
            Err(RetrievalError::DuplicateId { id, first, second }) => {
                assert_eq!((id.as_str(), first, second), ("a", 1, 3));
            }
            other => panic!("{other:?}"),
        }
        assert!(Bm25Index::build(vec![doc("q", "a"), doc("q", "b")], Bm25Params::default()).is_err());
    }

    #[test]
    fn malformed_lines_are_reported() {
        let text = "{\"id\":\"a\",\"domain\":\"x\",\"text\":\"one\"}\nnot json\n{\"id\":\"b\"}\n";
        let (docs, bad) = parse_corpus(text).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(bad.iter().map(|m| m.line).collect::<Vec<_>>(), [2, 3]);
    }

    #[test]
    fn rebuilding_is_idempotent() {
        let docs = toy().documents().to_vec();
        let a = Bm25Index::build(docs.clone(), Bm25Params::default()).unwrap();
        let b = Bm25Index::build(docs, Bm25Params::default()).unwrap();
        assert_eq!(a, b);
    }
}
