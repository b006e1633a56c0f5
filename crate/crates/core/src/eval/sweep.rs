//! One-axis hyperparameter sweeps and the segmentation ablation.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use super::judge::Judge;
use super::run::{evaluate_run, render_table, Comparison, EvalError, RunReport};
use crate::pipeline::{Mode, Pipeline, QueryRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    LearningRate,
    PairCount,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::LearningRate => "learning_rate",
            SweepAxis::PairCount => "pair_count",
        })
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "learning_rate" | "learning-rate" | "lr" => Ok(SweepAxis::LearningRate),
            "pair_count" | "pair-count" | "pairs" => Ok(SweepAxis::PairCount),
            _ => Err(format!("unknown sweep axis {s:?} (expected learning_rate or pair_count)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `None` for the naive baseline row.
    pub value: Option<f64>,
    pub accuracy: f64,
    pub avg_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub mode: Mode,
    pub baseline: SweepRow,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Header, the baseline as a `naive` row, then one row per grid point.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},accuracy,avg_seconds\n", self.axis);
        let _ = writeln!(out, "naive,{:.2},{:.6}", self.baseline.accuracy, self.baseline.avg_seconds);
        for r in &self.rows {
            let v = r.value.expect("grid rows carry a value");
            let _ = writeln!(out, "{v},{:.2},{:.6}", r.accuracy, r.avg_seconds);
        }
        out
    }
}

fn check_grid(axis: SweepAxis, grid: &[f64]) -> Result<(), EvalError> {
    if grid.is_empty() {
        return Err(EvalError::Grid("empty grid".into()));
    }
    for &v in grid {
        let ok = match axis {
            SweepAxis::LearningRate => v.is_finite() && v >= 0.0,
            SweepAxis::PairCount => v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64,
        };
        if !ok {
            return Err(EvalError::Grid(format!("{v} is not a valid {axis}")));
        }
    }
    Ok(())
}

/// Runs `mode` once per grid value with everything else fixed, plus one
/// naive run as the reference row. The pipeline's config is left as found.
pub fn sweep(
    pipeline: &mut Pipeline,
    queries: &[QueryRecord],
    axis: SweepAxis,
    grid: &[f64],
    mode: Mode,
    judge: &dyn Judge,
    parallel: usize,
) -> Result<SweepTable, EvalError> {
    check_grid(axis, grid)?;
    let base = evaluate_run(pipeline, queries, Mode::Naive, judge, parallel)?;
    let saved = pipeline.config;
    let mut rows = Vec::with_capacity(grid.len());
    for &v in grid {
        match axis {
            SweepAxis::LearningRate => pipeline.config.adaptation.learning_rate = v,
            SweepAxis::PairCount => pipeline.config.adaptation.pair_budget = v as usize,
        }
        let run = evaluate_run(pipeline, queries, mode, judge, parallel);
        pipeline.config = saved;
        let run = run?;
        rows.push(SweepRow {
            value: Some(v),
            accuracy: run.overall,
            avg_seconds: run.avg_seconds,
        });
    }
    Ok(SweepTable {
        axis,
        mode,
        baseline: SweepRow {
            value: None,
            accuracy: base.overall,
            avg_seconds: base.avg_seconds,
        },
        rows,
    })
}

/// TTARAG against whole-passage adaptation on the same queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ttarag: RunReport,
    pub woseg: RunReport,
}

impl AblationReport {
    pub fn run(
        pipeline: &mut Pipeline,
        queries: &[QueryRecord],
        judge: &dyn Judge,
        parallel: usize,
    ) -> Result<Self, EvalError> {
        Ok(Self {
            ttarag: evaluate_run(pipeline, queries, Mode::Ttarag, judge, parallel)?,
            woseg: evaluate_run(pipeline, queries, Mode::WoSeg, judge, parallel)?,
        })
    }

    /// Per-domain and overall accuracies; `gap` is ttarag minus wo-seg.
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let c = Comparison::new(&self.woseg, &self.ttarag)?;
        let mut out = String::from("domain,queries,ttarag,wo-seg,gap\n");
        for r in &c.rows {
            let _ = writeln!(out, "{},{},{:.2},{:.2},{:+.2}", r.domain, r.queries, r.treated, r.baseline, r.delta);
        }
        Ok(out)
    }

    pub fn to_table(&self) -> Result<String, EvalError> {
        let c = Comparison::new(&self.woseg, &self.ttarag)?;
        let headers: Vec<&str> = c.rows.iter().map(|r| r.domain.as_str()).collect();
        let rows = vec![
            ("ttarag".to_string(), c.rows.iter().map(|r| format!("{:.1}", r.treated)).collect()),
            ("wo-seg".to_string(), c.rows.iter().map(|r| format!("{:.1}", r.baseline)).collect()),
            ("gap".to_string(), c.rows.iter().map(|r| format!("{:+.1}", r.delta)).collect()),
        ];
        Ok(render_table("method", &headers, &rows))
    }
}
