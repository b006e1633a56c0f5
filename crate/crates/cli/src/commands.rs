use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use ttarag::eval::bench::generate_benchmark;
use ttarag::eval::{
    evaluate_run, sweep, AblationReport, Comparison, ExactJudge, F1Judge, Judge, RemoteJudge, RunReport,
};
use ttarag::lm::pretrain::pretrain;
use ttarag::lm::{checkpoint, LmConfig, Vocab, EOS};
use ttarag::pipeline::{parse_dataset, Pipeline, QueryRecord};
use ttarag::retrieval::{parse_corpus, Bm25Index, Bm25Params, Document};

use crate::config::{JudgeChoice, RawConfig, Settings};

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
}

fn prepare_out(raw: &RawConfig, s: &Settings) -> Result<()> {
    fs::create_dir_all(&s.out).with_context(|| format!("creating {}", s.out.display()))?;
    write(&s.out, "config.txt", raw.echo())
}

fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(&it)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct TextRecord {
    text: String,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    params: Bm25Params,
    documents: Vec<Document>,
}

fn load_corpus(p: &Path) -> Result<Vec<Document>> {
    let (docs, bad) = parse_corpus(&read(p)?)?;
    if let Some(first) = bad.first() {
        bail!(
            "{}: {} malformed line(s), first on line {}: {}",
            p.display(),
            bad.len(),
            first.line,
            first.reason
        );
    }
    Ok(docs)
}

pub fn gen_bench(raw: &RawConfig, s: &Settings) -> Result<()> {
    prepare_out(raw, s)?;
    let bench = generate_benchmark(&s.bench);
    let texts = bench.pretraining_texts(s.pipeline.top_k, s.reading_examples, s.rare_reading);
    write(&s.out, "corpus.jsonl", jsonl(&bench.corpus)?)?;
    write(&s.out, "queries.jsonl", jsonl(&bench.queries)?)?;
    write(&s.out, "train_queries.jsonl", jsonl(&bench.train_queries)?)?;
    write(&s.out, "pretrain.jsonl", jsonl(texts.into_iter().map(|text| TextRecord { text }))?)?;
    write(&s.out, "benchmark.json", serde_json::to_string_pretty(&bench)?)?;
    println!(
        "benchmark seed {}: {} passages, {} held-out questions ({}), written to {}",
        s.seed,
        bench.corpus.len(),
        bench.queries.len(),
        bench.heldout_domain,
        s.out.display()
    );
    Ok(())
}

pub fn pretrain_cmd(raw: &RawConfig, s: &Settings) -> Result<()> {
    let texts_path = s.require("pretrain_corpus", &s.pretrain_corpus)?;
    let corpus_path = s.require("corpus", &s.corpus)?;
    prepare_out(raw, s)?;
    let texts: Vec<String> = read(&texts_path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str::<TextRecord>(l)
                .map(|r| r.text)
                .with_context(|| format!("{} record {}", texts_path.display(), i + 1))
        })
        .collect::<Result<_>>()?;
    let corpus = load_corpus(&corpus_path)?;
    let vocab = Vocab::build(
        texts.iter().map(String::as_str).chain(corpus.iter().map(|d| d.text.as_str())),
        1,
    )?;
    let docs: Vec<Vec<usize>> = texts
        .iter()
        .map(|t| {
            let mut ids = vocab.encode(t);
            ids.push(EOS);
            ids
        })
        .collect();
    let cfg = LmConfig {
        vocab_size: vocab.len(),
        embed_dim: s.embed_dim,
        layers: s.layers,
        heads: s.heads,
        context_len: s.context_len,
        seed: s.seed,
        tied_embeddings: s.tied_embeddings,
    };
    let (lm, report) = pretrain(&docs, cfg, &s.pretrain)?;
    checkpoint::save(&s.out.join("model.ckpt"), &lm, &vocab)?;
    let mut curve = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        curve.push_str(&format!("{i},{l}\n"));
    }
    write(&s.out, "pretrain_losses.csv", curve)?;
    write(&s.out, "pretrain_report.json", serde_json::to_string_pretty(&report)?)?;
    println!(
        "pretrained {} parameters over {} documents, held-out loss {:.4} -> {:.4} (ln V = {:.4})",
        lm.num_params(),
        report.train_docs,
        report.heldout_initial,
        report.heldout_final,
        (vocab.len() as f64).ln()
    );
    Ok(())
}

pub fn index_cmd(raw: &RawConfig, s: &Settings) -> Result<()> {
    let corpus_path = s.require("corpus", &s.corpus)?;
    prepare_out(raw, s)?;
    let docs = load_corpus(&corpus_path)?;
    let index = Bm25Index::build(docs.clone(), s.bm25)?;
    write(
        &s.out,
        "index.json",
        serde_json::to_string(&IndexFile {
            params: s.bm25,
            documents: docs,
        })?,
    )?;
    println!(
        "indexed {} documents, average length {:.2} terms",
        index.len(),
        index.avgdl()
    );
    Ok(())
}

fn load_index(s: &Settings) -> Result<Bm25Index> {
    if s.index.is_some() {
        let p = s.require("index", &s.index)?;
        let f: IndexFile = serde_json::from_str(&read(&p)?).with_context(|| format!("parsing {}", p.display()))?;
        return Ok(Bm25Index::build(f.documents, f.params)?);
    }
    let p = s.require("corpus", &s.corpus)?;
    Ok(Bm25Index::build(load_corpus(&p)?, s.bm25)?)
}

fn load_dataset(s: &Settings) -> Result<Vec<QueryRecord>> {
    let p = s.require("dataset", &s.dataset)?;
    let mut recs = parse_dataset(&read(&p)?).with_context(|| p.display().to_string())?;
    if recs.is_empty() {
        bail!("{}: no questions", p.display());
    }
    if s.limit > 0 {
        recs.truncate(s.limit);
    }
    Ok(recs)
}

fn load_pipeline(s: &Settings) -> Result<(Pipeline, Vec<QueryRecord>)> {
    let ck = s.require("checkpoint", &s.checkpoint)?;
    let queries = load_dataset(s)?;
    let index = load_index(s)?;
    let (lm, vocab) = checkpoint::load(&ck).with_context(|| format!("loading {}", ck.display()))?;
    let p = Pipeline::new(lm, Arc::new(vocab), Arc::new(index), s.pipeline);
    Ok((p, queries))
}

fn judge(s: &Settings) -> Box<dyn Judge> {
    match s.judge {
        JudgeChoice::Exact => Box::new(ExactJudge),
        JudgeChoice::TokenF1 => Box::new(F1Judge {
            threshold: s.f1_threshold,
        }),
        JudgeChoice::Remote => Box::new(RemoteJudge::new(
            s.judge_url.clone().expect("validated"),
            Duration::from_secs(s.judge_timeout_secs),
        )),
    }
}

fn run_summary(r: &RunReport) -> String {
    let mut out = format!("mode {}  judge {}\n", r.mode, r.judge);
    for d in &r.domains {
        out.push_str(&format!("{:<12} {:>5} questions  {:>6.2}%\n", d.domain, d.queries, d.accuracy));
    }
    out.push_str(&format!("{:<12} {:>5} questions  {:>6.2}%\n", "overall", r.outcomes.len(), r.overall));
    out.push_str(&format!(
        "time: total {:.3} s, average {:.4} s per question\nfallbacks: {}\n",
        r.total_seconds, r.avg_seconds, r.fallbacks
    ));
    if !r.loss_trajectory.is_empty() {
        let t: Vec<String> = r.loss_trajectory.iter().map(|l| format!("{l:.4}")).collect();
        out.push_str(&format!("mean adaptation loss per example: {}\n", t.join(" ")));
    }
    out
}

fn write_run(dir: &Path, stem: &str, r: &RunReport) -> Result<()> {
    write(dir, &format!("{stem}.json"), serde_json::to_string_pretty(r)?)?;
    write(dir, &format!("{stem}.csv"), r.to_csv())?;
    write(dir, &format!("{stem}_outcomes.jsonl"), r.outcomes_jsonl())?;
    write(dir, &format!("{stem}_summary.txt"), run_summary(r))
}

pub fn run_cmd(raw: &RawConfig, s: &Settings) -> Result<()> {
    let (mut p, queries) = load_pipeline(s)?;
    prepare_out(raw, s)?;
    let j = judge(s);
    let report = evaluate_run(&mut p, &queries, s.mode, j.as_ref(), s.parallel)?;
    write_run(&s.out, "report", &report)?;
    print!("{}", run_summary(&report));
    Ok(())
}

pub fn sweep_cmd(raw: &RawConfig, s: &Settings) -> Result<()> {
    let (mut p, queries) = load_pipeline(s)?;
    prepare_out(raw, s)?;
    let j = judge(s);
    let table = sweep(&mut p, &queries, s.axis, &s.grid, s.mode, j.as_ref(), s.parallel)?;
    let csv = table.to_csv();
    write(&s.out, "sweep.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn ablate_cmd(raw: &RawConfig, s: &Settings) -> Result<()> {
    let (mut p, queries) = load_pipeline(s)?;
    prepare_out(raw, s)?;
    let j = judge(s);
    let report = AblationReport::run(&mut p, &queries, j.as_ref(), s.parallel)?;
    write_run(&s.out, "ttarag", &report.ttarag)?;
    write_run(&s.out, "wo-seg", &report.woseg)?;
    write(&s.out, "ablation.csv", report.to_csv()?)?;
    let table = report.to_table()?;
    write(&s.out, "ablation.txt", &table)?;
    print!("{table}");
    Ok(())
}

pub fn report_cmd(raw: &RawConfig, s: &Settings) -> Result<()> {
    let load = |name: &str, p: &Option<std::path::PathBuf>| -> Result<RunReport> {
        let p = s.require(name, p)?;
        serde_json::from_str(&read(&p)?).with_context(|| format!("parsing {}", p.display()))
    };
    let base = load("baseline", &s.baseline)?;
    let treated = load("treated", &s.treated)?;
    prepare_out(raw, s)?;
    let c = Comparison::new(&base, &treated)?;
    write(&s.out, "comparison.csv", c.to_csv())?;
    let mut table = c.to_table();
    table.push_str(&format!(
        "\naverage seconds per question: {} {:.4}, {} {:.4}\n",
        c.baseline_mode, c.baseline_avg_seconds, c.treated_mode, c.treated_avg_seconds
    ));
    write(&s.out, "table.txt", &table)?;
    print!("{table}");
    Ok(())
}
