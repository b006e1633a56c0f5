//! Benchmark runs: per-query answers, judged and aggregated per domain.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::judge::{Judge, JudgeError, JudgeKind, Verdict};
use crate::pipeline::{Fallback, Mode, Pipeline, PipelineError, QueryRecord};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("runs cover different query sets")]
    QuerySetMismatch,
    #[error("invalid sweep grid: {0}")]
    Grid(String),
    #[error("query {id}: {source}")]
    Pipeline {
        id: String,
        #[source]
        source: PipelineError,
    },
    #[error("query {id}: {source}")]
    Judge {
        id: String,
        #[source]
        source: JudgeError,
    },
    #[error("worker thread panicked")]
    Worker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub domain: String,
    pub prediction: String,
    pub verdict: Verdict,
    pub fallback: Option<Fallback>,
    pub seconds: f64,
    pub example_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub domain: String,
    pub queries: usize,
    pub correct: usize,
    /// Percent.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub judge: JudgeKind,
    /// Sorted by query id.
    pub outcomes: Vec<QueryOutcome>,
    /// Sorted by domain name.
    pub domains: Vec<DomainScore>,
    pub overall: f64,
    /// Mean pre-update loss of the i-th adaptation example, over the queries
    /// that adapted on at least i+1 examples.
    pub loss_trajectory: Vec<f64>,
    pub fallbacks: usize,
    pub total_seconds: f64,
    pub avg_seconds: f64,
}

pub fn accuracy(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    }
}

pub fn average_seconds(total: f64, queries: usize) -> f64 {
    if queries == 0 {
        0.0
    } else {
        total / queries as f64
    }
}

impl RunReport {
    pub fn from_outcomes(mode: Mode, judge: JudgeKind, mut outcomes: Vec<QueryOutcome>) -> Result<Self, EvalError> {
        if outcomes.is_empty() {
            return Err(EvalError::EmptyDataset);
        }
        outcomes.sort_by(|a, b| a.query_id.cmp(&b.query_id));
        let mut per: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for o in &outcomes {
            let e = per.entry(&o.domain).or_default();
            e.0 += 1;
            e.1 += usize::from(o.verdict.is_correct());
        }
        let domains: Vec<DomainScore> = per
            .into_iter()
            .map(|(d, (n, c))| DomainScore {
                domain: d.to_string(),
                queries: n,
                correct: c,
                accuracy: accuracy(c, n),
            })
            .collect();
        let correct = domains.iter().map(|d| d.correct).sum();
        let overall = accuracy(correct, outcomes.len());

        let longest = outcomes.iter().map(|o| o.example_losses.len()).max().unwrap_or(0);
        let loss_trajectory = (0..longest)
            .map(|i| {
                let vals: Vec<f64> = outcomes.iter().filter_map(|o| o.example_losses.get(i).copied()).collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            })
            .collect();
        let total_seconds = outcomes.iter().map(|o| o.seconds).sum();
        Ok(Self {
            mode,
            judge,
            fallbacks: outcomes.iter().filter(|o| o.fallback.is_some()).count(),
            avg_seconds: average_seconds(total_seconds, outcomes.len()),
            total_seconds,
            outcomes,
            domains,
            overall,
            loss_trajectory,
        })
    }

    /// The report with every timing field zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.total_seconds = 0.0;
        r.avg_seconds = 0.0;
        r.outcomes.iter_mut().for_each(|o| o.seconds = 0.0);
        r
    }

    pub fn domain(&self, name: &str) -> Option<&DomainScore> {
        self.domains.iter().find(|d| d.domain == name)
    }

    pub fn predictions(&self) -> impl Iterator<Item = (&str, &str)> {
        self.outcomes.iter().map(|o| (o.query_id.as_str(), o.prediction.as_str()))
    }

    /// One row per domain plus an `overall` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("domain,queries,correct,accuracy\n");
        for d in &self.domains {
            let _ = writeln!(out, "{},{},{},{:.2}", d.domain, d.queries, d.correct, d.accuracy);
        }
        let correct: usize = self.domains.iter().map(|d| d.correct).sum();
        let _ = writeln!(out, "overall,{},{},{:.2}", self.outcomes.len(), correct, self.overall);
        out
    }

    pub fn outcomes_jsonl(&self) -> String {
        self.outcomes
            .iter()
            .map(|o| serde_json::to_string(o).expect("outcome serializes") + "\n")
            .collect()
    }
}

/// Answers every record in `mode`, judges the output and aggregates. With
/// `parallel > 1` the records are split across that many pipeline replicas;
/// the report does not depend on the split.
pub fn evaluate_run(
    pipeline: &mut Pipeline,
    queries: &[QueryRecord],
    mode: Mode,
    judge: &dyn Judge,
    parallel: usize,
) -> Result<RunReport, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let workers = parallel.clamp(1, queries.len());
    let outcomes = if workers == 1 {
        run_chunk(pipeline, queries, mode, judge)?
    } else {
        let chunk = queries.len().div_ceil(workers);
        let replicas = (0..workers)
            .map(|_| pipeline.replica())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|source| EvalError::Pipeline {
                id: queries[0].id.clone(),
                source,
            })?;
        std::thread::scope(|s| {
            let handles: Vec<_> = replicas
                .into_iter()
                .zip(queries.chunks(chunk))
                .map(|(mut p, qs)| s.spawn(move || run_chunk(&mut p, qs, mode, judge)))
                .collect();
            let mut all = Vec::with_capacity(queries.len());
            for h in handles {
                all.extend(h.join().map_err(|_| EvalError::Worker)??);
            }
            Ok::<_, EvalError>(all)
        })?
    };
    RunReport::from_outcomes(mode, judge.kind(), outcomes)
}

fn run_chunk(
    pipeline: &mut Pipeline,
    queries: &[QueryRecord],
    mode: Mode,
    judge: &dyn Judge,
) -> Result<Vec<QueryOutcome>, EvalError> {
    queries
        .iter()
        .map(|q| {
            let ans = pipeline.answer(q, mode).map_err(|source| EvalError::Pipeline {
                id: q.id.clone(),
                source,
            })?;
            let verdict = judge
                .judge(&q.question, &ans.text, &q.answers)
                .map_err(|source| EvalError::Judge {
                    id: q.id.clone(),
                    source,
                })?;
            Ok(QueryOutcome {
                query_id: q.id.clone(),
                domain: q.domain.clone(),
                prediction: ans.text,
                verdict,
                fallback: ans.fallback,
                seconds: ans.timings.total,
                example_losses: ans.trace.map(|t| t.example_losses).unwrap_or_default(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub domain: String,
    pub queries: usize,
    pub baseline: f64,
    pub treated: f64,
    pub delta: f64,
}

/// Accuracy of one mode against a baseline over the same query set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline_mode: Mode,
    pub treated_mode: Mode,
    /// Per domain, then `overall` last.
    pub rows: Vec<DeltaRow>,
    pub baseline_avg_seconds: f64,
    pub treated_avg_seconds: f64,
}

impl Comparison {
    pub fn new(baseline: &RunReport, treated: &RunReport) -> Result<Self, EvalError> {
        let ids = |r: &RunReport| r.outcomes.iter().map(|o| o.query_id.clone()).collect::<BTreeSet<_>>();
        if ids(baseline) != ids(treated) {
            return Err(EvalError::QuerySetMismatch);
        }
        let mut rows: Vec<DeltaRow> = baseline
            .domains
            .iter()
            .map(|b| {
                let t = treated.domain(&b.domain).expect("same query set implies same domains");
                DeltaRow {
                    domain: b.domain.clone(),
                    queries: b.queries,
                    baseline: b.accuracy,
                    treated: t.accuracy,
                    delta: t.accuracy - b.accuracy,
                }
            })
            .collect();
        rows.push(DeltaRow {
            domain: "overall".into(),
            queries: baseline.outcomes.len(),
            baseline: baseline.overall,
            treated: treated.overall,
            delta: treated.overall - baseline.overall,
        });
        Ok(Self {
            baseline_mode: baseline.mode,
            treated_mode: treated.mode,
            rows,
            baseline_avg_seconds: baseline.avg_seconds,
            treated_avg_seconds: treated.avg_seconds,
        })
    }

    pub fn overall(&self) -> &DeltaRow {
        self.rows.last().expect("overall row always present")
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("domain,queries,{},{},delta\n", self.baseline_mode, self.treated_mode);
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.2},{:.2},{:+.2}", r.domain, r.queries, r.baseline, r.treated, r.delta);
        }
        out
    }

    /// Domains as columns, one row per mode and a delta row.
    pub fn to_table(&self) -> String {
        let label = |m: Mode| match m {
            Mode::Naive => "naive-rag".to_string(),
            other => other.to_string(),
        };
        let base = label(self.baseline_mode);
        let rows = [
            (base.clone(), self.rows.iter().map(|r| format!("{:.1}", r.baseline)).collect::<Vec<_>>()),
            (label(self.treated_mode), self.rows.iter().map(|r| format!("{:.1}", r.treated)).collect()),
            (format!("delta vs {base}"), self.rows.iter().map(|r| format!("{:+.1}", r.delta)).collect()),
        ];
        let headers: Vec<&str> = self.rows.iter().map(|r| r.domain.as_str()).collect();
        render_table("method", &headers, &rows)
    }
}

pub(crate) fn render_table(corner: &str, headers: &[&str], rows: &[(String, Vec<String>)]) -> String {
    let first = rows.iter().map(|r| r.0.len()).chain([corner.len()]).max().unwrap_or(0);
    let widths: Vec<usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| rows.iter().map(|r| r.1[i].len()).chain([h.len()]).max().unwrap_or(0))
        .collect();
    let mut out = format!("{corner:<first$}");
    for (h, w) in headers.iter().zip(&widths) {
        let _ = write!(out, "  {h:>w$}");
    }
    out.push('\n');
    let rule = first + widths.iter().map(|w| w + 2).sum::<usize>();
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for (name, cells) in rows {
        let _ = write!(out, "{name:<first$}");
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
    }
    out
}
