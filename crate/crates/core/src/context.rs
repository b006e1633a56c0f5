//! Turns retrieved passages into prefix/suffix training pairs.
//!
//! A passage is split at the first word that ends in one of `. , ; : ! ?`
//! provided both sides keep at least three words; the mark stays with the
//! prefix. Otherwise it is split at the word midpoint (`floor(n / 2)` words
//! go to the prefix). Passages under six words are not split.

use serde::{Deserialize, Serialize};

use crate::lm::tokenize;
use crate::retrieval::Document;

pub const MIN_SIDE_WORDS: usize = 3;
pub const SPLIT_MARKS: [char; 6] = ['.', ',', ';', ':', '!', '?'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Punctuation,
    Midpoint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixSuffixPair {
    pub prefix: String,
    pub suffix: String,
    pub source_id: String,
    pub kind: SplitKind,
}

/// Keeps passages with at least `min_len` tokens (punctuation counts as a
/// token), preserving order.
pub fn filter_passages<'a>(passages: &[&'a Document], min_len: usize) -> Vec<&'a Document> {
    passages
        .iter()
        .copied()
        .filter(|d| tokenize(&d.text).len() >= min_len)
        .collect()
}

/// Splits `text` into `(prefix, suffix, kind)`, or `None` when it has fewer
/// than `2 * MIN_SIDE_WORDS` words.
pub fn split_text(text: &str) -> Option<(String, String, SplitKind)> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let n = words.len();
    if n < 2 * MIN_SIDE_WORDS {
        return None;
    }
    let boundary = words
        .iter()
        .enumerate()
        .filter(|(_, w)| w.ends_with(SPLIT_MARKS))
        .map(|(i, _)| i + 1)
        .find(|&cut| cut >= MIN_SIDE_WORDS && n - cut >= MIN_SIDE_WORDS);
    let (cut, kind) = match boundary {
        Some(cut) => (cut, SplitKind::Punctuation),
        None => (n / 2, SplitKind::Midpoint),
    };
    Some((words[..cut].join(" "), words[cut..].join(" "), kind))
}

pub fn split_passage(doc: &Document) -> Option<PrefixSuffixPair> {
    split_text(&doc.text).map(|(prefix, suffix, kind)| PrefixSuffixPair {
        prefix,
        suffix,
        source_id: doc.id.clone(),
        kind,
    })
}

/// Filters, then splits passages in rank order, one pair per passage, until
/// `budget` pairs exist. Unsplittable passages are skipped.
pub fn build_adaptation_set(ranked: &[&Document], budget: usize, min_len: usize) -> Vec<PrefixSuffixPair> {
    if budget == 0 {
        return Vec::new();
    }
    filter_passages(ranked, min_len)
        .into_iter()
        .filter_map(split_passage)
        .take(budget)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, text: &str) -> Document {
        Document {
            id: id.into(),
            domain: "t".into(),
            text: text.into(),
        }
    }

    #[test]
    fn punctuation_split() {
        let (p, s, k) =
            split_text("Paris is the capital of France, and it is known for the Eiffel Tower.").unwrap();
        assert_eq!(p, "Paris is the capital of France,");
        assert_eq!(s, "and it is known for the Eiffel Tower.");
        assert_eq!(k, SplitKind::Punctuation);
    }

    #[test]
    fn midpoint_without_punctuation() {
        let (p, s, k) = split_text("alpha beta gamma delta epsilon zeta").unwrap();
        assert_eq!((p.as_str(), s.as_str(), k), ("alpha beta gamma", "delta epsilon zeta", SplitKind::Midpoint));
    }

    #[test]
    fn unusable_marks_fall_back_to_midpoint() {
        let (p, s, k) = split_text("Yes, the quick brown fox jumps over the dog.").unwrap();
        assert_eq!(p, "Yes, the quick brown");
        assert_eq!(s, "fox jumps over the dog.");
        assert_eq!(k, SplitKind::Midpoint);
    }

    #[test]
    fn short_passages_are_unsplittable() {
        assert_eq!(split_text("one two three four"), None);
        assert_eq!(split_text("one two three four five"), None);
        assert!(split_text("one two three four five six").is_some());
    }

    #[test]
    fn marks_inside_words_are_not_boundaries() {
        let (_, _, k) = split_text("pi is 3.14 roughly and e is 2.71 too").unwrap();
        assert_eq!(k, SplitKind::Midpoint);
    }

    #[test]
    fn filter_is_stable() {
        let a = doc("a", "one two three four five six");
        let b = doc("b", "hello world .");
        let c = doc("c", "x y z w v u t");
        let all = [&a, &b, &c];
        assert_eq!(filter_passages(&all, 0), all.to_vec());
        assert_eq!(filter_passages(&all, 6), vec![&a, &c]);
        assert!(filter_passages(&[&b], 6).is_empty());
    }

    #[test]
    fn adaptation_set_respects_budget_and_rank() {
        let docs: Vec<Document> = (0..5)
            .map(|i| doc(&format!("d{i}"), "w1 w2 w3 w4 w5 w6 w7"))
            .collect();
        let refs: Vec<&Document> = docs.iter().collect();
        assert!(build_adaptation_set(&refs, 0, 6).is_empty());
        let ids: Vec<String> = build_adaptation_set(&refs, 3, 6).into_iter().map(|p| p.source_id).collect();
        assert_eq!(ids, ["d0", "d1", "d2"]);

        let mixed = [
            doc("s1", "short one"),
            doc("s2", "a b c d e f g"),
            doc("s3", "tiny"),
            doc("s4", "h i j k l m n"),
            doc("s5", "four words only here"),
        ];
        let refs: Vec<&Document> = mixed.iter().collect();
        let ids: Vec<String> = build_adaptation_set(&refs, 3, 0).into_iter().map(|p| p.source_id).collect();
        assert_eq!(ids, ["s2", "s4"]);
    }
}
