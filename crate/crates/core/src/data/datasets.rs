//! The four dataset record types, their builders, and JSON-lines persistence.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{NritError, Result};
use crate::model::{TokenId, NO, YES};
use crate::text;

use super::contains_tokens;
use super::prompts::{render_prompt, PromptKind, Slots, NO_EVIDENCE};
use super::retrieval::Retriever;
use super::world::{Corpus, Query, World};

pub const CHOICES: [&str; 2] = ["YES", "NO"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextType {
    Rel,
    Irrel,
}

impl fmt::Display for ContextType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextType::Rel => "rel",
            ContextType::Irrel => "irrel",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionInstance {
    pub id: String,
    pub question: String,
    pub context: String,
    pub proposed_answer: String,
    pub choices: Vec<String>,
    /// Index into `choices`.
    pub gold: usize,
    #[serde(rename = "type")]
    pub context_type: ContextType,
}

impl AttributionInstance {
    pub fn validate(&self) -> Result<()> {
        if self.choices != CHOICES || self.gold > 1 {
            return Err(NritError::format(
                "attribution instance",
                format!("{}: choices must be [YES, NO] with gold 0 or 1", self.id),
            ));
        }
        Ok(())
    }

    pub fn prompt(&self) -> Result<String> {
        render_prompt(
            PromptKind::Attribution,
            &Slots {
                question: Some(&self.question),
                context: Some(&self.context),
                proposed_answer: Some(&self.proposed_answer),
                documents: None,
            },
        )
    }

    pub fn query_only_prompt(&self) -> Result<String> {
        render_prompt(
            PromptKind::AttributionQueryOnly,
            &Slots {
                question: Some(&self.question),
                proposed_answer: Some(&self.proposed_answer),
                ..Default::default()
            },
        )
    }

    pub fn gold_token(&self) -> TokenId {
        if self.gold == 0 {
            YES
        } else {
            NO
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiseInstance {
    pub id: String,
    pub question: String,
    pub doc_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RsInstance {
    pub id: String,
    pub question: String,
    pub doc_ids: Vec<String>,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaInstance {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub doc_ids: Vec<String>,
    pub answer_present: bool,
}

/// Which documents fill the stage-1 prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoisePrompt {
    /// Documents sharing no content token with the query.
    Irrelevant,
    /// The query's own top-k retrieval.
    Relevant,
}

impl FromStr for DenoisePrompt {
    type Err = NritError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "irrelevant" => Ok(DenoisePrompt::Irrelevant),
            "relevant" => Ok(DenoisePrompt::Relevant),
            other => Err(NritError::Config(format!("denoise_prompt must be irrelevant or relevant, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub top_n: usize,
    pub top_k: usize,
    pub attribution_per_type: usize,
    /// Token cap on oracle summaries.
    pub summary_cap: usize,
    pub denoise_prompt: DenoisePrompt,
    /// Extra relevant-summary instances retrieved with answer-bearing
    /// documents removed, as a fraction of the training queries.
    pub rs_absent_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            top_n: 50,
            top_k: 5,
            attribution_per_type: 389,
            summary_cap: 142,
            denoise_prompt: DenoisePrompt::Irrelevant,
            rs_absent_fraction: 0.0,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_n < self.top_k {
            return Err(NritError::Config("retrieval needs 1 <= top_k <= top_n".into()));
        }
        if self.attribution_per_type == 0 || self.summary_cap == 0 {
            return Err(NritError::Config("attribution_per_type and summary_cap must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rs_absent_fraction) {
            return Err(NritError::Config("rs_absent_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Builder output with any skipped-query warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct Built<T> {
    pub items: T,
    pub warnings: Vec<String>,
}

fn answer_tokens(q: &Query) -> Vec<Vec<String>> {
    q.gold_answers.iter().map(|a| text::tokens(a)).collect()
}

fn mentions_answer(doc_text: &str, answers: &[Vec<String>]) -> bool {
    let toks = text::tokens(doc_text);
    answers.iter().any(|a| contains_tokens(&toks, a))
}

/// Ids of documents containing any gold answer of `q`.
pub fn answer_bearing(corpus: &Corpus, q: &Query) -> BTreeSet<String> {
    let answers = answer_tokens(q);
    corpus
        .docs
        .iter()
        .filter(|d| mentions_answer(&d.text(), &answers))
        .map(|d| d.id.clone())
        .collect()
}

/// Zero-overlap documents that also avoid the gold answer, in id order.
fn irrelevant_pool(retriever: &Retriever<'_>, q: &Query) -> Vec<String> {
    let answers = answer_tokens(q);
    let corpus = retriever.corpus();
    retriever
        .rank_all(&q.text)
        .into_iter()
        .filter(|r| r.score == 0)
        .filter(|r| !mentions_answer(&corpus.get(&r.doc_id).expect("ranked doc").text(), &answers))
        .map(|r| r.doc_id)
        .collect()
}

fn doc_text(corpus: &Corpus, id: &str) -> Result<String> {
    corpus
        .get(id)
        .map(|d| d.text())
        .ok_or_else(|| NritError::Index(format!("unknown document {id}")))
}

/// Document texts in the given order.
pub fn doc_texts(corpus: &Corpus, ids: &[String]) -> Result<Vec<String>> {
    ids.iter().map(|id| doc_text(corpus, id)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributionSets {
    pub rel: Vec<AttributionInstance>,
    pub irrel: Vec<AttributionInstance>,
}

impl AttributionSets {
    pub fn all(&self) -> impl Iterator<Item = &AttributionInstance> {
        self.rel.iter().chain(&self.irrel)
    }
}

/// Pairs each query with its top-1 retrieved document (labelled YES) and
/// with a zero-overlap document (labelled NO), taking queries in order until
/// `n_per_type` pairs exist. A query lacking either context is skipped.
///
/// The zero-overlap document is drawn by a seeded choice among all
/// zero-overlap documents so irrelevant contexts vary across queries.
pub fn build_attribution_sets(
    corpus: &Corpus,
    queries: &[Query],
    n_per_type: usize,
    top_n: usize,
    seed: u64,
) -> Built<AttributionSets> {
    let retriever = Retriever::new(corpus);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sets = AttributionSets {
        rel: Vec::new(),
        irrel: Vec::new(),
    };
    let mut warnings = Vec::new();
    for q in queries {
        if sets.rel.len() >= n_per_type {
            break;
        }
        let answers = answer_tokens(q);
        let top = retriever.retrieve(&q.text, top_n, 1);
        let rel_ctx = top
            .first()
            .map(|r| corpus.get(&r.doc_id).expect("retrieved doc").text())
            .filter(|t| mentions_answer(t, &answers));
        let Some(rel_ctx) = rel_ctx else {
            warnings.push(format!("{}: top-1 document lacks the answer; skipped", q.id));
            continue;
        };
        let pool = irrelevant_pool(&retriever, q);
        let Some(irrel_id) = pool.choose(&mut rng) else {
            warnings.push(format!("{}: no zero-overlap document; skipped", q.id));
            continue;
        };
        let make = |context: String, gold, context_type| AttributionInstance {
            id: format!("attr-{context_type}-{}", q.id),
            question: q.text.clone(),
            context,
            proposed_answer: q.gold_answers[0].clone(),
            choices: CHOICES.iter().map(|s| s.to_string()).collect(),
            gold,
            context_type,
        };
        sets.rel.push(make(rel_ctx, 0, ContextType::Rel));
        sets.irrel.push(make(doc_text(corpus, irrel_id).expect("pool doc"), 1, ContextType::Irrel));
    }
    Built { items: sets, warnings }
}

/// Stage-1 prompts: `k` zero-overlap documents per query (or the top-k
/// retrieval under [`DenoisePrompt::Relevant`]); the target is EOT.
pub fn build_denoise_set(
    corpus: &Corpus,
    queries: &[Query],
    k: usize,
    mode: DenoisePrompt,
    top_n: usize,
    seed: u64,
) -> Built<Vec<DenoiseInstance>> {
    let retriever = Retriever::new(corpus);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0e5);
    let mut items = Vec::new();
    let mut warnings = Vec::new();
    for q in queries {
        let doc_ids: Vec<String> = match mode {
            DenoisePrompt::Relevant => retriever.retrieve(&q.text, top_n, k).into_iter().map(|r| r.doc_id).collect(),
            DenoisePrompt::Irrelevant => {
                let pool = irrelevant_pool(&retriever, q);
                if pool.len() < k {
                    warnings.push(format!("{}: only {} irrelevant documents; skipped", q.id, pool.len()));
                    continue;
                }
                pool.choose_multiple(&mut rng, k).cloned().collect()
            }
        };
        items.push(DenoiseInstance {
            id: format!("dn-{}", q.id),
            question: q.text.clone(),
            doc_ids,
        });
    }
    Built { items, warnings }
}

/// Extractive oracle summary: every sentence of the retrieved documents
/// (retrieval order, then sentence order) that contains a gold answer or
/// both the subject and relation of a fact in the query's chain. Whole
/// sentences are kept while the total stays within `cap` tokens.
pub fn oracle_summary(world: &World, q: &Query, corpus: &Corpus, doc_ids: &[String], cap: usize) -> Result<String> {
    let answers = answer_tokens(q);
    let keys: Vec<(String, String)> = q
        .chain
        .iter()
        .map(|&f| (world.facts[f].subject.clone(), world.facts[f].relation.clone()))
        .collect();
    let mut picked: Vec<&str> = Vec::new();
    let mut used = 0;
    'docs: for id in doc_ids {
        let doc = corpus
            .get(id)
            .ok_or_else(|| NritError::Index(format!("unknown document {id}")))?;
        for s in &doc.sentences {
            let toks = text::tokens(s);
            let hit = answers.iter().any(|a| contains_tokens(&toks, a))
                || keys.iter().any(|(subj, rel)| toks.contains(subj) && toks.contains(rel));
            if !hit || picked.contains(&s.as_str()) {
                continue;
            }
            if used + toks.len() > cap {
                break 'docs;
            }
            used += toks.len();
            picked.push(s);
        }
    }
    if picked.is_empty() {
        return Ok(NO_EVIDENCE.to_string());
    }
    Ok(format!("{}.", picked.join(". ")))
}

/// Relevant-summary instances over each query's top-k retrieval, plus
/// answer-absent variants for a seeded `rs_absent_fraction` of the queries.
pub fn build_rs_set(world: &World, queries: &[Query], cfg: &DataConfig) -> Result<Built<Vec<RsInstance>>> {
    let corpus = &world.corpus;
    let retriever = Retriever::new(corpus);
    let mut items = Vec::new();
    for q in queries {
        let doc_ids: Vec<String> = retriever
            .retrieve(&q.text, cfg.top_n, cfg.top_k)
            .into_iter()
            .map(|r| r.doc_id)
            .collect();
        items.push(RsInstance {
            id: format!("rs-{}", q.id),
            question: q.text.clone(),
            summary: oracle_summary(world, q, corpus, &doc_ids, cfg.summary_cap)?,
            doc_ids,
        });
    }
    let n_absent = (queries.len() as f64 * cfg.rs_absent_fraction).round() as usize;
    let mut picks: Vec<usize> = (0..queries.len()).collect();
    picks.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xab5e));
    let mut picks: Vec<usize> = picks.into_iter().take(n_absent).collect();
    picks.sort_unstable();
    for i in picks {
        let q = &queries[i];
        let doc_ids = absent_retrieval(corpus, q, cfg);
        items.push(RsInstance {
            id: format!("rs-absent-{}", q.id),
            question: q.text.clone(),
            summary: oracle_summary(world, q, corpus, &doc_ids, cfg.summary_cap)?,
            doc_ids,
        });
    }
    Ok(Built {
        items,
        warnings: Vec::new(),
    })
}

fn absent_retrieval(corpus: &Corpus, q: &Query, cfg: &DataConfig) -> Vec<String> {
    let reduced = corpus.without(&answer_bearing(corpus, q));
    Retriever::new(&reduced)
        .retrieve(&q.text, cfg.top_n, cfg.top_k)
        .into_iter()
        .map(|r| r.doc_id)
        .collect()
}

/// Evaluation instances: for every query, one over the full corpus and one
/// over the corpus with answer-bearing documents removed. The
/// `answer_present` flag is computed by scanning the retrieved documents.
pub fn build_qa_set(corpus: &Corpus, queries: &[Query], cfg: &DataConfig) -> Vec<QaInstance> {
    let retriever = Retriever::new(corpus);
    let mut out = Vec::with_capacity(queries.len() * 2);
    for q in queries {
        let answers = answer_tokens(q);
        let full: Vec<String> = retriever
            .retrieve(&q.text, cfg.top_n, cfg.top_k)
            .into_iter()
            .map(|r| r.doc_id)
            .collect();
        for (suffix, doc_ids) in [("full", full), ("absent", absent_retrieval(corpus, q, cfg))] {
            let answer_present = doc_ids
                .iter()
                .any(|id| mentions_answer(&corpus.get(id).expect("retrieved doc").text(), &answers));
            out.push(QaInstance {
                id: format!("qa-{}-{suffix}", q.id),
                question: q.text.clone(),
                gold_answers: q.gold_answers.clone(),
                doc_ids,
                answer_present,
            });
        }
    }
    out
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("plain records serialise"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(no, l)| serde_json::from_str(l).map_err(|e| NritError::format("jsonl", format!("line {}: {e}", no + 1))))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    std::fs::write(path, to_jsonl(items))?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    from_jsonl(&std::fs::read_to_string(path)?)
}
