//! Answer judges: normalized containment, token F1, and a remote judge
//! reached over HTTP.

use std::collections::HashMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Incorrect,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Correct
        } else {
            Verdict::Incorrect
        }
    }

    pub fn is_correct(self) -> bool {
        self == Verdict::Correct
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JudgeKind {
    Exact,
    TokenF1,
    Remote,
}

impl fmt::Display for JudgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JudgeKind::Exact => "exact",
            JudgeKind::TokenF1 => "token-f1",
            JudgeKind::Remote => "remote",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgement {
    pub query_id: String,
    pub verdict: Verdict,
    pub judge: JudgeKind,
}

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("remote judge request failed: {0}")]
    Transport(String),
    #[error("remote judge sent an unreadable response: {0}")]
    Protocol(String),
}

/// Lowercases, removes punctuation and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation() && !is_unicode_punctuation(*c))
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn is_unicode_punctuation(c: char) -> bool {
    matches!(c, '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205e}' | '\u{3001}'..='\u{3003}' | '¡' | '¿' | '«' | '»')
}

/// Correct iff some gold, normalized, occurs as a contiguous run of tokens in
/// the normalized prediction. Golds that normalize to nothing never match.
pub fn judge_exact<S: AsRef<str>>(prediction: &str, golds: &[S]) -> Verdict {
    let pred = normalize(prediction);
    Verdict::from_bool(golds.iter().any(|g| {
        let gold = normalize(g.as_ref());
        !gold.is_empty() && pred.windows(gold.len()).any(|w| w == gold.as_slice())
    }))
}

/// Token-level F1 between the normalized bags of words. Two empty strings
/// score 1, one empty string scores 0.
pub fn judge_f1(prediction: &str, gold: &str) -> f64 {
    let pred = normalize(prediction);
    let gold = normalize(gold);
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Something that can decide whether a prediction answers a question.
pub trait Judge: Send + Sync {
    fn kind(&self) -> JudgeKind;
    fn judge(&self, question: &str, prediction: &str, golds: &[String]) -> Result<Verdict, JudgeError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExactJudge;

impl Judge for ExactJudge {
    fn kind(&self) -> JudgeKind {
        JudgeKind::Exact
    }

    fn judge(&self, _question: &str, prediction: &str, golds: &[String]) -> Result<Verdict, JudgeError> {
        Ok(judge_exact(prediction, golds))
    }
}

/// Correct when the best F1 against any gold reaches `threshold`.
#[derive(Debug, Clone, Copy)]
pub struct F1Judge {
    pub threshold: f64,
}

impl Default for F1Judge {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

impl Judge for F1Judge {
    fn kind(&self) -> JudgeKind {
        JudgeKind::TokenF1
    }

    fn judge(&self, _question: &str, prediction: &str, golds: &[String]) -> Result<Verdict, JudgeError> {
        let best = golds.iter().map(|g| judge_f1(prediction, g)).fold(0.0, f64::max);
        Ok(Verdict::from_bool(best >= self.threshold))
    }
}

#[derive(Debug, Serialize)]
pub struct RemoteRequest<'a> {
    pub question: &'a str,
    pub prediction: &'a str,
    pub golds: &'a [String],
}

#[derive(Debug, Deserialize)]
pub struct RemoteResponse {
    pub verdict: Verdict,
}

/// Posts one JSON request per judgement; see `docs/remote-judge.md`.
#[derive(Debug)]
pub struct RemoteJudge {
    url: String,
    agent: ureq::Agent,
}

impl RemoteJudge {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            url: url.into(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl Judge for RemoteJudge {
    fn kind(&self) -> JudgeKind {
        JudgeKind::Remote
    }

    fn judge(&self, question: &str, prediction: &str, golds: &[String]) -> Result<Verdict, JudgeError> {
        let body = RemoteRequest {
            question,
            prediction,
            golds,
        };
        let resp = self
            .agent
            .post(&self.url)
            .send_json(&body)
            .map_err(|e| JudgeError::Transport(e.to_string()))?;
        let parsed: RemoteResponse = resp.into_json().map_err(|e| JudgeError::Protocol(e.to_string()))?;
        Ok(parsed.verdict)
    }
}
