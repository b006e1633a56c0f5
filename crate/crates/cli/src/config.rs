//! Flat `key = value` configuration with command-line overrides.
//!
//! Every key in [`KEYS`] is accepted both in the config file and as a
//! `--kebab-case` flag; flags win. The resolved values are echoed into the
//! output directory as a config file that reproduces the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ttarag::adapt::{AdaptationConfig, OptimizerKind};
use ttarag::eval::bench::BenchmarkConfig;
use ttarag::eval::SweepAxis;
use ttarag::lm::pretrain::PretrainConfig;
use ttarag::pipeline::{Mode, PipelineConfig};
use ttarag::retrieval::Bm25Params;

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    pub alias: Option<&'static str>,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default,
        help,
        alias: None,
    }
}

pub const DEFAULT_SEED: &str = "7";

pub const KEYS: &[Key] = &[
    key("out", "out", "output directory"),
    key("corpus", "", "passage corpus, JSON lines with id, domain, text"),
    key("dataset", "", "QA dataset, JSON lines with id, domain, question, answers"),
    key("checkpoint", "", "model checkpoint written by `pretrain`"),
    key("index", "", "index file written by `index`; used instead of `corpus` when set"),
    key("pretrain_corpus", "", "pretraining texts, JSON lines with a text field"),
    key("baseline", "", "report.json of the baseline run (`report`)"),
    key("treated", "", "report.json of the compared run (`report`)"),
    key("seed", DEFAULT_SEED, "seed for benchmark generation, initialization and batching"),
    key("n_domains", "5", "benchmark domains, the last one held out"),
    key("facts_per_domain", "300", "facts (passages) per domain"),
    key("queries_per_domain", "200", "questions over the held-out domain"),
    key("attributes_per_domain", "10", "attribute words per domain"),
    key("reading_examples", "20000", "made-up reading-comprehension examples in the pretraining texts"),
    key("rare_reading", "0", "further made-up examples over held-out-domain words"),
    key("embed_dim", "64", "model width"),
    key("layers", "2", "transformer blocks"),
    key("heads", "4", "attention heads per block"),
    key("context_len", "256", "maximum sequence length"),
    key("tied_embeddings", "true", "share the token embedding with the output projection"),
    key("steps", "3000", "pretraining steps"),
    key("pretrain_lr", "0.003", "peak pretraining learning rate"),
    key("batch_size", "8", "pretraining sequences per step"),
    key("warmup_steps", "50", "linear warmup steps before cosine decay"),
    key("top_k", "5", "passages retrieved per question"),
    key("k1", "1.2", "BM25 term-frequency saturation"),
    key("b", "0.75", "BM25 length normalization"),
    key("min_len", "6", "minimum passage length in tokens for adaptation"),
    key("max_new_tokens", "8", "generation budget per answer"),
    Key {
        alias: Some("lr"),
        ..key("learning_rate", "1e-5", "test-time adaptation learning rate")
    },
    key("accumulation_steps", "2", "examples per optimizer update"),
    key("pair_budget", "3", "prefix/suffix pairs per query"),
    key("clip_norm", "0.1", "global gradient-norm bound, `inf` disables"),
    key("beta1", "0.9", "AdamW first-moment decay"),
    key("beta2", "0.999", "AdamW second-moment decay"),
    key("epsilon", "1e-8", "AdamW denominator constant"),
    key("weight_decay", "0.01", "decoupled weight decay"),
    key("optimizer", "adamw", "adamw or plain-sgd"),
    key("mode", "ttarag", "answering mode for `run`: ttarag, naive or wo-seg"),
    key("judge", "exact", "exact, token-f1 or remote"),
    key("judge_url", "", "endpoint of the remote judge"),
    key("judge_timeout_secs", "30", "remote judge request timeout"),
    key("f1_threshold", "0.5", "token-F1 needed for a correct verdict"),
    key("parallel", "1", "pipeline replicas answering in parallel"),
    key("limit", "0", "answer only the first N questions, 0 for all"),
    key("axis", "learning_rate", "sweep axis: learning_rate (lr) or pair_count (pairs)"),
    key("grid", "1e-6,5e-6,1e-5,5e-5,1e-4", "comma-separated sweep values"),
];

pub fn find_key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

pub fn valid_keys() -> String {
    KEYS.iter().map(|k| k.name).collect::<Vec<_>>().join(", ")
}

/// Raw string values, defaults filled in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }
}

/// A config problem the user has to fix.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: String) -> anyhow::Error {
    UsageError(msg).into()
}

impl RawConfig {
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let k = find_key(name).ok_or_else(|| usage(format!("unknown key `{name}` (valid keys: {})", valid_keys())))?;
        self.values.insert(k.name, value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, name: &str) -> &str {
        self.values.get(name).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {name}"))
    }

    /// Applies a config file. Blank lines and `#` comments are ignored; each
    /// other line is `key = value`. A key may appear once.
    pub fn apply_file(&mut self, text: &str, origin: &Path) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(usage(format!("{}:{}: expected `key = value`", origin.display(), n + 1)));
            };
            let k = k.trim();
            if let Some(first) = seen.insert(k.to_string(), n + 1) {
                return Err(usage(format!(
                    "{}:{}: key `{k}` already set on line {first}",
                    origin.display(),
                    n + 1
                )));
            }
            self.set(k, v).map_err(|e| usage(format!("{}:{}: {e}", origin.display(), n + 1)))?;
        }
        Ok(())
    }

    /// Every key, one `key = value` line each, in table order.
    pub fn echo(&self) -> String {
        let mut out = String::from("# effective configuration\n");
        for k in KEYS {
            let _ = writeln!(out, "{} = {}", k.name, self.get(k.name));
        }
        out
    }

    pub fn resolve(&self) -> Result<Settings> {
        Settings::from_raw(self).map_err(|e| usage(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JudgeChoice {
    Exact,
    TokenF1,
    Remote,
}

/// Typed view of a [`RawConfig`].
#[derive(Debug, Clone)]
pub struct Settings {
    pub out: PathBuf,
    pub corpus: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub pretrain_corpus: Option<PathBuf>,
    pub baseline: Option<PathBuf>,
    pub treated: Option<PathBuf>,
    pub seed: u64,
    pub bench: BenchmarkConfig,
    pub reading_examples: usize,
    pub rare_reading: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context_len: usize,
    pub tied_embeddings: bool,
    pub pretrain: PretrainConfig,
    pub bm25: Bm25Params,
    pub pipeline: PipelineConfig,
    pub mode: Mode,
    pub judge: JudgeChoice,
    pub judge_url: Option<String>,
    pub judge_timeout_secs: u64,
    pub f1_threshold: f64,
    pub parallel: usize,
    pub limit: usize,
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
}

fn num<T: std::str::FromStr>(raw: &RawConfig, name: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let v = raw.get(name);
    v.parse::<T>().map_err(|e| anyhow::anyhow!("`{name}`: cannot parse {v:?}: {e}"))
}

fn path(raw: &RawConfig, name: &str) -> Option<PathBuf> {
    let v = raw.get(name);
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn positive(name: &str, v: usize) -> Result<usize> {
    if v == 0 {
        bail!("`{name}` must be at least 1");
    }
    Ok(v)
}

fn unit_open(name: &str, v: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&v) {
        bail!("`{name}` must lie in [0, 1), got {v}");
    }
    Ok(v)
}

fn nonneg(name: &str, v: f64) -> Result<f64> {
    if !(v >= 0.0) || !v.is_finite() {
        bail!("`{name}` must be a finite nonnegative number, got {v}");
    }
    Ok(v)
}

impl Settings {
    fn from_raw(raw: &RawConfig) -> Result<Self> {
        let seed: u64 = num(raw, "seed")?;
        let bench = BenchmarkConfig {
            seed,
            n_domains: num(raw, "n_domains")?,
            facts_per_domain: positive("facts_per_domain", num(raw, "facts_per_domain")?)?,
            queries_per_domain: num(raw, "queries_per_domain")?,
            attributes_per_domain: positive("attributes_per_domain", num(raw, "attributes_per_domain")?)?,
        };
        if bench.n_domains < 2 {
            bail!("`n_domains` must be at least 2");
        }
        let clip_norm: f64 = num(raw, "clip_norm")?;
        if clip_norm.is_nan() || clip_norm < 0.0 {
            bail!("`clip_norm` must be nonnegative or inf, got {clip_norm}");
        }
        let optimizer: OptimizerKind = raw
            .get("optimizer")
            .parse()
            .map_err(|e| anyhow::anyhow!("`optimizer`: {e}"))?;
        let adaptation = AdaptationConfig {
            learning_rate: nonneg("learning_rate", num(raw, "learning_rate")?)?,
            accumulation_steps: positive("accumulation_steps", num(raw, "accumulation_steps")?)?,
            pair_budget: num(raw, "pair_budget")?,
            clip_norm,
            beta1: unit_open("beta1", num(raw, "beta1")?)?,
            beta2: unit_open("beta2", num(raw, "beta2")?)?,
            epsilon: nonneg("epsilon", num(raw, "epsilon")?)?,
            weight_decay: nonneg("weight_decay", num(raw, "weight_decay")?)?,
            optimizer,
        };
        adaptation.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        let judge = match raw.get("judge") {
            "exact" => JudgeChoice::Exact,
            "token-f1" | "f1" => JudgeChoice::TokenF1,
            "remote" => JudgeChoice::Remote,
            other => bail!("`judge`: unknown judge {other:?} (expected exact, token-f1 or remote)"),
        };
        let judge_url = (!raw.get("judge_url").is_empty()).then(|| raw.get("judge_url").to_string());
        if judge == JudgeChoice::Remote && judge_url.is_none() {
            bail!("`judge = remote` needs `judge_url`");
        }
        let grid = raw
            .get("grid")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|e| anyhow::anyhow!("`grid`: cannot parse {s:?}: {e}")))
            .collect::<Result<Vec<_>>>()?;
        let embed_dim = positive("embed_dim", num(raw, "embed_dim")?)?;
        let heads = positive("heads", num(raw, "heads")?)?;
        if embed_dim % heads != 0 {
            bail!("`embed_dim` ({embed_dim}) must be divisible by `heads` ({heads})");
        }
        Ok(Self {
            out: PathBuf::from(raw.get("out")),
            corpus: path(raw, "corpus"),
            dataset: path(raw, "dataset"),
            checkpoint: path(raw, "checkpoint"),
            index: path(raw, "index"),
            pretrain_corpus: path(raw, "pretrain_corpus"),
            baseline: path(raw, "baseline"),
            treated: path(raw, "treated"),
            seed,
            bench,
            reading_examples: num(raw, "reading_examples")?,
            rare_reading: num(raw, "rare_reading")?,
            embed_dim,
            layers: positive("layers", num(raw, "layers")?)?,
            heads,
            context_len: positive("context_len", num(raw, "context_len")?)?,
            tied_embeddings: num(raw, "tied_embeddings")?,
            pretrain: PretrainConfig {
                steps: num(raw, "steps")?,
                lr: nonneg("pretrain_lr", num(raw, "pretrain_lr")?)?,
                batch_size: positive("batch_size", num(raw, "batch_size")?)?,
                warmup_steps: num(raw, "warmup_steps")?,
                seed,
                ..PretrainConfig::default()
            },
            bm25: Bm25Params {
                k1: nonneg("k1", num(raw, "k1")?)?,
                b: nonneg("b", num(raw, "b")?)?,
            },
            pipeline: PipelineConfig {
                top_k: num(raw, "top_k")?,
                min_len: num(raw, "min_len")?,
                max_new_tokens: num(raw, "max_new_tokens")?,
                adaptation,
            },
            mode: raw.get("mode").parse().map_err(|e| anyhow::anyhow!("`mode`: {e}"))?,
            judge,
            judge_url,
            judge_timeout_secs: num(raw, "judge_timeout_secs")?,
            f1_threshold: nonneg("f1_threshold", num(raw, "f1_threshold")?)?,
            parallel: positive("parallel", num(raw, "parallel")?)?,
            limit: num(raw, "limit")?,
            axis: raw.get("axis").parse().map_err(|e| anyhow::anyhow!("`axis`: {e}"))?,
            grid,
        })
    }

    /// The path stored under `name`, which must be set and exist.
    pub fn require(&self, name: &str, p: &Option<PathBuf>) -> Result<PathBuf> {
        let p = p
            .as_ref()
            .ok_or_else(|| usage(format!("`{name}` is required for this command")))?;
        if !p.exists() {
            return Err(usage(format!("{name} not found: {}", p.display())));
        }
        Ok(p.clone())
    }
}

/// Reads a config file into `raw`.
pub fn load_file(raw: &mut RawConfig, file: &Path) -> Result<()> {
    let text = std::fs::read_to_string(file)
        .with_context(|| format!("reading config {}", file.display()))
        .map_err(|e| usage(format!("{e:#}")))?;
    raw.apply_file(&text, file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let s = RawConfig::default().resolve().unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.pipeline.adaptation.pair_budget, 3);
        assert_eq!(s.grid.len(), 5);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let mut raw = RawConfig::default();
        let err = raw.apply_file("pair_budget = 2\nbogus = 1\n", Path::new("c.conf")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus") && msg.contains("learning_rate") && msg.contains("c.conf:2"), "{msg}");
        assert!(err.downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn file_syntax() {
        let mut raw = RawConfig::default();
        raw.apply_file("# comment\n\n top_k = 9 \nlearning_rate=0\n", Path::new("x")).unwrap();
        assert_eq!(raw.get("top_k"), "9");
        assert_eq!(raw.resolve().unwrap().pipeline.adaptation.learning_rate, 0.0);
        assert!(raw.apply_file("top_k 9", Path::new("x")).is_err());
        assert!(RawConfig::default().apply_file("seed = 1\nseed = 2", Path::new("x")).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut raw = RawConfig::default();
        raw.set("clip_norm", "inf").unwrap();
        raw.set("mode", "wo-seg").unwrap();
        let mut again = RawConfig::default();
        again.apply_file(&raw.echo(), Path::new("echo")).unwrap();
        assert_eq!(raw, again);
        assert!(again.resolve().unwrap().pipeline.adaptation.clip_norm.is_infinite());
    }

    #[test]
    fn range_checks() {
        for (k, v) in [("beta1", "1.0"), ("learning_rate", "-1"), ("heads", "0"), ("embed_dim", "30"), ("judge", "remote")] {
            let mut raw = RawConfig::default();
            raw.set(k, v).unwrap();
            assert!(raw.resolve().is_err(), "{k} = {v}");
        }
    }
}
