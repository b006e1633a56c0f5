//! Per-query answering: retrieve, optionally adapt, generate, reset.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::{adapt, AdaptExample, AdaptationConfig, AdaptationTrace};
use crate::context::{build_adaptation_set, filter_passages};
use crate::lm::{Lm, LmError, ParameterSnapshot, TokenId, Vocab};
use crate::retrieval::{Bm25Index, Document};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("question alone needs {len} tokens but the context holds {context}")]
    QuestionTooLong { len: usize, context: usize },
    #[error("empty question")]
    EmptyQuestion,
    #[error(transparent)]
    Model(#[from] LmError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub domain: String,
    pub question: String,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Ttarag,
    Naive,
    WoSeg,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Ttarag => "ttarag",
            Mode::Naive => "naive",
            Mode::WoSeg => "wo-seg",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ttarag" => Ok(Mode::Ttarag),
            "naive" => Ok(Mode::Naive),
            "wo-seg" | "woseg" => Ok(Mode::WoSeg),
            _ => Err(format!("unknown mode {s:?} (expected ttarag, naive or wo-seg)")),
        }
    }
}

/// Why an adapting mode answered with the unadapted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fallback {
    EmptyAdaptationSet,
    AdaptationFailed(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub retrieve: f64,
    pub adapt: f64,
    pub generate: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub query_id: String,
    pub text: String,
    pub mode: Mode,
    pub retrieved: Vec<String>,
    pub trace: Option<AdaptationTrace>,
    pub fallback: Option<Fallback>,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub top_k: usize,
    /// Minimum passage length, in tokens, to be used for adaptation.
    pub min_len: usize,
    pub max_new_tokens: usize,
    pub adaptation: AdaptationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            min_len: 6,
            max_new_tokens: 8,
            adaptation: AdaptationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub text: String,
    pub ids: Vec<TokenId>,
    /// How many of the offered passages made it into the prompt.
    pub passages_used: usize,
}

/// The prompt template without any length budget.
pub fn render_prompt(question: &str, passages: &[&str]) -> String {
    let mut text = String::new();
    if !passages.is_empty() {
        text.push_str("Context:\n");
        for p in passages {
            text.push_str(p);
            text.push('\n');
        }
    }
    text.push_str("Question: ");
    text.push_str(question.trim());
    text.push_str("\nAnswer:");
    text
}

/// Fixed template: a `Context:` header with one passage per line (omitted
/// when there are none), then `Question: <q>` and the cue `Answer:`.
/// Lowest-ranked passages are dropped until the encoding fits `budget`
/// tokens. Errors only when the question-only prompt exceeds `context`.
pub fn assemble_prompt(
    vocab: &Vocab,
    question: &str,
    passages: &[&str],
    budget: usize,
    context: usize,
) -> Result<Prompt, PipelineError> {
    if question.trim().is_empty() {
        return Err(PipelineError::EmptyQuestion);
    }
    for used in (0..=passages.len()).rev() {
        let text = render_prompt(question, &passages[..used]);
        let ids = vocab.encode(&text);
        if ids.len() <= budget || (used == 0 && ids.len() <= context) {
            return Ok(Prompt {
                text,
                ids,
                passages_used: used,
            });
        }
        if used == 0 {
            return Err(PipelineError::QuestionTooLong {
                len: ids.len(),
                context,
            });
        }
    }
    unreachable!("loop returns at used == 0")
}

/// Owns one model replica plus shared read-only retrieval state.
pub struct Pipeline {
    lm: Lm,
    pristine: Arc<ParameterSnapshot>,
    vocab: Arc<Vocab>,
    index: Arc<Bm25Index>,
    pub config: PipelineConfig,
}

impl Pipeline {
    /// Takes the model's current parameters as the pristine state.
    pub fn new(lm: Lm, vocab: Arc<Vocab>, index: Arc<Bm25Index>, config: PipelineConfig) -> Self {
        let pristine = Arc::new(lm.snapshot());
        Self {
            lm,
            pristine,
            vocab,
            index,
            config,
        }
    }

    /// An independent pipeline with its own model restored from the same
    /// pristine snapshot.
    pub fn replica(&self) -> Result<Self, PipelineError> {
        let lm = Lm::from_snapshot(*self.lm.config(), &self.pristine)?;
        Ok(Self {
            lm,
            pristine: Arc::clone(&self.pristine),
            vocab: Arc::clone(&self.vocab),
            index: Arc::clone(&self.index),
            config: self.config,
        })
    }

    pub fn lm(&self) -> &Lm {
        &self.lm
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn index(&self) -> &Bm25Index {
        &self.index
    }

    pub fn pristine(&self) -> &ParameterSnapshot {
        &self.pristine
    }

    pub fn retrieve(&self, question: &str) -> Vec<&Document> {
        self.index
            .retrieve(question, self.config.top_k)
            .into_iter()
            .map(|h| h.doc)
            .collect()
    }

    pub fn prompt_for(&self, question: &str, passages: &[&Document]) -> Result<Prompt, PipelineError> {
        let texts: Vec<&str> = passages.iter().map(|d| d.text.as_str()).collect();
        let context = self.lm.config().context_len;
        let budget = context.saturating_sub(self.config.max_new_tokens);
        assemble_prompt(&self.vocab, question, &texts, budget, context)
    }

    fn generate(&self, prompt: &Prompt) -> Result<String, PipelineError> {
        let out = self.lm.greedy_generate(&prompt.ids, self.config.max_new_tokens)?;
        Ok(self.vocab.decode(&out))
    }

    pub fn answer(&mut self, query: &QueryRecord, mode: Mode) -> Result<Answer, PipelineError> {
        match mode {
            Mode::Naive => self.answer_naive(query),
            Mode::Ttarag => self.answer_ttarag(query),
            Mode::WoSeg => self.answer_woseg(query),
        }
    }

    /// Retrieve, prompt and generate with the pristine parameters.
    pub fn answer_naive(&self, query: &QueryRecord) -> Result<Answer, PipelineError> {
        let start = Instant::now();
        let docs = self.retrieve(&query.question);
        let retrieve = start.elapsed().as_secs_f64();
        let prompt = self.prompt_for(&query.question, &docs)?;
        let t = Instant::now();
        let text = self.generate(&prompt)?;
        let generate = t.elapsed().as_secs_f64();
        Ok(Answer {
            query_id: query.id.clone(),
            text,
            mode: Mode::Naive,
            retrieved: docs.iter().map(|d| d.id.clone()).collect(),
            trace: None,
            fallback: None,
            timings: StageTimings {
                retrieve,
                adapt: 0.0,
                generate,
                total: start.elapsed().as_secs_f64(),
            },
        })
    }

    /// Retrieve, adapt on prefix/suffix pairs from the passages, generate
    /// with the adapted parameters, then reset to the pristine snapshot.
    pub fn answer_ttarag(&mut self, query: &QueryRecord) -> Result<Answer, PipelineError> {
        self.answer_adapted(query, Mode::Ttarag)
    }

    /// As [`Pipeline::answer_ttarag`], but each example is a whole passage
    /// with loss on every passage token.
    pub fn answer_woseg(&mut self, query: &QueryRecord) -> Result<Answer, PipelineError> {
        self.answer_adapted(query, Mode::WoSeg)
    }

    fn examples_for(&self, docs: &[&Document], mode: Mode) -> Vec<AdaptExample> {
        let budget = self.config.adaptation.pair_budget;
        match mode {
            Mode::WoSeg => filter_passages(docs, self.config.min_len)
                .into_iter()
                .take(budget)
                .map(|d| AdaptExample::whole_passage(&d.id, &d.text))
                .collect(),
            _ => build_adaptation_set(docs, budget, self.config.min_len)
                .iter()
                .map(AdaptExample::from)
                .collect(),
        }
    }

    fn answer_adapted(&mut self, query: &QueryRecord, mode: Mode) -> Result<Answer, PipelineError> {
        let start = Instant::now();
        let docs = self.retrieve(&query.question);
        let retrieved: Vec<String> = docs.iter().map(|d| d.id.clone()).collect();
        let examples = self.examples_for(&docs, mode);
        let prompt = self.prompt_for(&query.question, &docs)?;
        let retrieve = start.elapsed().as_secs_f64();

        let t = Instant::now();
        let (trace, fallback) = if examples.is_empty() {
            (None, Some(Fallback::EmptyAdaptationSet))
        } else {
            match adapt(
                &mut self.lm,
                &self.pristine,
                &self.vocab,
                &query.question,
                &examples,
                &self.config.adaptation,
            ) {
                Ok(trace) => (Some(trace), None),
                Err(e) => {
                    self.lm.restore(&self.pristine)?;
                    (None, Some(Fallback::AdaptationFailed(e.to_string())))
                }
            }
        };
        let adapt_secs = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let generated = self.generate(&prompt);
        let generate = t.elapsed().as_secs_f64();
        self.lm.restore(&self.pristine)?;
        Ok(Answer {
            query_id: query.id.clone(),
            text: generated?,
            mode,
            retrieved,
            trace,
            fallback,
            timings: StageTimings {
                retrieve,
                adapt: adapt_secs,
                generate,
                total: start.elapsed().as_secs_f64(),
            },
        })
    }
}

/// A QA dataset line that could not be used.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("dataset line {line}: {reason}")]
pub struct DatasetError {
    pub line: usize,
    pub reason: String,
}

/// Parses a JSON-lines QA dataset, skipping blank lines. Records need a
/// nonempty question, at least one answer and an id not seen before.
pub fn parse_dataset(text: &str) -> Result<Vec<QueryRecord>, DatasetError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| DatasetError { line: n + 1, reason };
        let rec: QueryRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if rec.question.trim().is_empty() {
            return Err(err("empty question".into()));
        }
        if rec.answers.is_empty() {
            return Err(err("no gold answers".into()));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(err(format!("duplicate id {:?}", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(
            ["Context: Question: Answer: alpha beta gamma delta epsilon zeta eta theta iota kappa ?"],
            1,
        )
        .unwrap()
    }

    #[test]
    fn prompt_without_passages() {
        let p = assemble_prompt(&vocab(), "alpha beta ?", &[], 100, 100).unwrap();
        assert_eq!(p.text, "Question: alpha beta ?\nAnswer:");
        assert_eq!(p.passages_used, 0);
    }

    #[test]
    fn prompt_is_deterministic_and_ranked() {
        let v = vocab();
        let passages = ["gamma delta", "epsilon zeta"];
        let a = assemble_prompt(&v, "alpha ?", &passages, 100, 100).unwrap();
        let b = assemble_prompt(&v, "alpha ?", &passages, 100, 100).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.text, "Context:\ngamma delta\nepsilon zeta\nQuestion: alpha ?\nAnswer:");
        assert_eq!(a.ids.len(), 2 + 4 + 2 + 2 + 2);
    }

    #[test]
    fn truncation_drops_lowest_ranked_first() {
        let v = vocab();
        let passages = ["gamma delta", "epsilon zeta eta", "theta iota kappa"];
        // question-only is 6 tokens; each passage adds its length, the header 2
        let full = assemble_prompt(&v, "alpha ?", &passages, 100, 100).unwrap();
        assert_eq!(full.ids.len(), 6 + 2 + 2 + 3 + 3);
        let p = assemble_prompt(&v, "alpha ?", &passages, 15, 100).unwrap();
        assert_eq!(p.passages_used, 2);
        assert_eq!(p.ids.len(), 13);
        assert!(p.text.contains("epsilon") && !p.text.contains("theta"));
        let p = assemble_prompt(&v, "alpha ?", &passages, 9, 100).unwrap();
        assert_eq!(p.passages_used, 0);
    }

    #[test]
    fn overlong_question_errors() {
        let v = vocab();
        let q = "alpha ".repeat(20);
        assert!(matches!(
            assemble_prompt(&v, &q, &[], 10, 10),
            Err(PipelineError::QuestionTooLong { .. })
        ));
        assert!(matches!(assemble_prompt(&v, " ", &[], 10, 10), Err(PipelineError::EmptyQuestion)));
    }

    #[test]
    fn mode_round_trips_through_strings() {
        for m in [Mode::Ttarag, Mode::Naive, Mode::WoSeg] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
    }

    #[test]
    fn dataset_parsing() {
        let ok = r#"{"id":"a","domain":"d","question":"what?","answers":["x"]}

{"id":"b","domain":"d","question":"who?","answers":["y","z"]}"#;
        let recs = parse_dataset(ok).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].answers, vec!["y", "z"]);
        let dup = r#"{"id":"a","domain":"d","question":"q","answers":["x"]}
{"id":"a","domain":"d","question":"q","answers":["x"]}"#;
        assert_eq!(parse_dataset(dup).unwrap_err().line, 2);
        let empty = r#"{"id":"a","domain":"d","question":" ","answers":["x"]}"#;
        assert!(parse_dataset(empty).is_err());
        let none = r#"{"id":"a","domain":"d","question":"q","answers":[]}"#;
        assert!(parse_dataset(none).is_err());
    }
}
