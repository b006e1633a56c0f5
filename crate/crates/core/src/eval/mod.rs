//! Judging, run aggregation, sweeps and the synthetic benchmark.

pub mod bench;
pub mod judge;
pub mod run;
pub mod sweep;

pub use judge::{judge_exact, judge_f1, normalize, ExactJudge, F1Judge, Judge, JudgeError, JudgeKind, Judgement, RemoteJudge, Verdict};
pub use run::{average_seconds, evaluate_run, Comparison, DeltaRow, DomainScore, EvalError, QueryOutcome, RunReport};
pub use sweep::{sweep, AblationReport, SweepAxis, SweepRow, SweepTable};
