//! Synthetic domain-shift benchmark.
//!
//! Every domain owns a private set of pseudo-words for entities,
//! attributes and values. Facts render as `the <attr> of <entity> is
//! <value>.` and questions as `what is the <attr> of <entity>?`. Values are
//! unique per fact, so each gold answer occurs in exactly one passage. The
//! last domain is held out: its words never appear in the pretraining
//! material.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pipeline::{render_prompt, QueryRecord};
use crate::retrieval::{Bm25Index, Bm25Params, Document};

/// Words shared by every domain's templates and the prompt.
pub const FUNCTION_WORDS: [&str; 7] = ["the", "of", "is", "what", "context", "question", "answer"];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub n_domains: usize,
    pub facts_per_domain: usize,
    pub queries_per_domain: usize,
    pub attributes_per_domain: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_domains: 5,
            facts_per_domain: 300,
            queries_per_domain: 200,
            attributes_per_domain: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub entity: String,
    pub attribute: String,
    pub value: String,
}

impl Fact {
    pub fn passage(&self) -> String {
        format!("the {} of {} is {}.", self.attribute, self.entity, self.value)
    }

    pub fn question(&self) -> String {
        format!("what is the {} of {}?", self.attribute, self.entity)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub entities: Vec<String>,
    pub attributes: Vec<String>,
    pub facts: Vec<Fact>,
}

impl DomainSpec {
    pub fn content_words(&self) -> impl Iterator<Item = &str> {
        self.entities
            .iter()
            .chain(&self.attributes)
            .map(String::as_str)
            .chain(self.facts.iter().map(|f| f.value.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticBenchmark {
    pub config: BenchmarkConfig,
    pub domains: Vec<DomainSpec>,
    pub heldout_domain: String,
    /// Passages of every domain, the retrieval corpus.
    pub corpus: Vec<Document>,
    /// Questions over the held-out domain.
    pub queries: Vec<QueryRecord>,
    /// One question per fact of each pretraining domain.
    pub train_queries: Vec<QueryRecord>,
}

impl SyntheticBenchmark {
    pub fn pretraining_passages(&self) -> impl Iterator<Item = &Document> {
        self.corpus.iter().filter(move |d| d.domain != self.heldout_domain)
    }

    pub fn heldout_passages(&self) -> impl Iterator<Item = &Document> {
        self.corpus.iter().filter(move |d| d.domain == self.heldout_domain)
    }

    /// Pretraining documents, shuffled: every pretraining-domain passage;
    /// one question-answering example per training question, rendered with
    /// the answering prompt over the top-`k` pretraining passages and followed
    /// by the gold answer; and `reading` examples over freshly drawn facts
    /// that recombine pretraining-domain words, which can only be answered
    /// by reading the context. A further `rare` reading examples draw on the
    /// held-out domain's words, never stating one of its real facts, so that
    /// those words are rare rather than absent.
    pub fn pretraining_texts(&self, k: usize, reading: usize, rare: usize) -> Vec<String> {
        let passages: Vec<Document> = self.pretraining_passages().cloned().collect();
        let mut texts: Vec<String> = passages.iter().map(|d| d.text.clone()).collect();
        let index = Bm25Index::build(passages, Bm25Params::default()).expect("benchmark ids are unique");
        for q in &self.train_queries {
            let hits = index.retrieve(&q.question, k);
            let ctx: Vec<&str> = hits.iter().map(|h| h.doc.text.as_str()).collect();
            texts.push(format!("{} {}", render_prompt(&q.question, &ctx), q.answers[0]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_0f_2ead);
        let pool: Vec<&DomainSpec> = self.domains.iter().filter(|d| d.name != self.heldout_domain).collect();
        for _ in 0..reading {
            let dom = pool[rng.gen_range(0..pool.len())];
            texts.push(reading_example(dom, k, &mut rng, &HashMap::new()));
        }
        let held = self.heldout();
        let real: HashMap<(&str, &str), &str> = held
            .facts
            .iter()
            .map(|f| ((f.entity.as_str(), f.attribute.as_str()), f.value.as_str()))
            .collect();
        for _ in 0..rare {
            texts.push(reading_example(held, k, &mut rng, &real));
        }
        texts.shuffle(&mut rng);
        texts
    }

    pub fn heldout(&self) -> &DomainSpec {
        self.domains
            .iter()
            .find(|d| d.name == self.heldout_domain)
            .expect("held-out domain exists")
    }
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::with_capacity(2 * syllables + 1);
    for _ in 0..syllables {
        w.push(*CONSONANTS.choose(rng).expect("nonempty") as char);
        w.push(*VOWELS.choose(rng).expect("nonempty") as char);
    }
    if rng.gen_bool(0.5) {
        w.push(*CONSONANTS.choose(rng).expect("nonempty") as char);
    }
    w
}

fn fresh_words(rng: &mut ChaCha8Rng, n: usize, used: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = pseudo_word(rng);
        if used.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// A question over `k` made-up facts, ordered as retrieval would rank them:
/// the asked fact first, then facts sharing its entity or attribute.
/// Facts listed in `avoid` (entity, attribute to value) are never stated.
fn reading_example(
    dom: &DomainSpec,
    k: usize,
    rng: &mut ChaCha8Rng,
    avoid: &HashMap<(&str, &str), &str>,
) -> String {
    let k = k.max(1);
    let entity = dom.entities.choose(rng).expect("nonempty");
    let attrs: Vec<&String> = dom.attributes.choose_multiple(rng, k.min(dom.attributes.len())).collect();
    let value = |rng: &mut ChaCha8Rng, e: &str, a: &str| loop {
        let v = &dom.facts.choose(rng).expect("nonempty").value;
        if avoid.get(&(e, a)) != Some(&v.as_str()) {
            return v.clone();
        }
    };
    let asked = Fact {
        entity: entity.clone(),
        attribute: attrs[0].clone(),
        value: value(rng, entity, attrs[0]),
    };
    let mut facts = vec![asked.clone()];
    for (i, a) in attrs.iter().enumerate().skip(1) {
        let e = if i % 2 == 0 {
            entity.clone()
        } else {
            dom.entities.choose(rng).expect("nonempty").clone()
        };
        let attribute = if e == *entity { (*a).clone() } else { asked.attribute.clone() };
        if facts.iter().any(|f| f.entity == e && f.attribute == attribute) {
            continue;
        }
        let v = value(rng, &e, &attribute);
        facts.push(Fact {
            entity: e,
            attribute,
            value: v,
        });
    }
    facts[1..].shuffle(rng);
    let ctx: Vec<String> = facts.iter().map(Fact::passage).collect();
    let ctx: Vec<&str> = ctx.iter().map(String::as_str).collect();
    format!("{} {}", render_prompt(&asked.question(), &ctx), asked.value)
}

pub fn domain_name(i: usize) -> String {
    format!("domain{i}")
}

pub fn generate_benchmark(cfg: &BenchmarkConfig) -> SyntheticBenchmark {
    assert!(cfg.n_domains >= 2, "need at least one pretraining and one held-out domain");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut used: HashSet<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
    let n_attr = cfg.attributes_per_domain.max(1);
    let n_ent = cfg.facts_per_domain.div_ceil(n_attr).max(1);

    let mut domains = Vec::with_capacity(cfg.n_domains);
    for d in 0..cfg.n_domains {
        let entities = fresh_words(&mut rng, n_ent, &mut used);
        let attributes = fresh_words(&mut rng, n_attr, &mut used);
        let mut pairs: Vec<(usize, usize)> = (0..n_ent).flat_map(|e| (0..n_attr).map(move |a| (e, a))).collect();
        pairs.shuffle(&mut rng);
        pairs.truncate(cfg.facts_per_domain);
        let values = fresh_words(&mut rng, pairs.len(), &mut used);
        let facts = pairs
            .into_iter()
            .zip(values)
            .map(|((e, a), value)| Fact {
                entity: entities[e].clone(),
                attribute: attributes[a].clone(),
                value,
            })
            .collect();
        domains.push(DomainSpec {
            name: domain_name(d),
            entities,
            attributes,
            facts,
        });
    }
    let heldout_domain = domains.last().expect("n_domains >= 2").name.clone();

    let mut corpus = Vec::new();
    let mut train_queries = Vec::new();
    let mut queries = Vec::new();
    for dom in &domains {
        for (i, f) in dom.facts.iter().enumerate() {
            corpus.push(Document {
                id: format!("{}-p{i:04}", dom.name),
                domain: dom.name.clone(),
                text: f.passage(),
            });
        }
        let make_query = |i: usize, f: &Fact| QueryRecord {
            id: format!("{}-q{i:04}", dom.name),
            domain: dom.name.clone(),
            question: f.question(),
            answers: vec![f.value.clone()],
        };
        if dom.name == heldout_domain {
            let mut order: Vec<usize> = (0..dom.facts.len()).collect();
            order.shuffle(&mut rng);
            order.truncate(cfg.queries_per_domain);
            order.sort_unstable();
            queries.extend(order.into_iter().map(|i| make_query(i, &dom.facts[i])));
        } else {
            train_queries.extend(dom.facts.iter().enumerate().map(|(i, f)| make_query(i, f)));
        }
    }
    SyntheticBenchmark {
        config: *cfg,
        domains,
        heldout_domain,
        corpus,
        queries,
        train_queries,
    }
}
