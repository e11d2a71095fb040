//! Deterministic synthetic entity-relation world and its document corpus.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NritError, Result};
use crate::text;

use super::prompts::template_words;
use super::retrieval::STOPWORDS;

/// Relation vocabulary; `true` marks relations whose object is another entity.
pub const RELATIONS: [(&str, bool); 20] = [
    ("capital", false),
    ("mentor", true),
    ("river", false),
    ("rival", true),
    ("language", false),
    ("ally", true),
    ("currency", false),
    ("founder", true),
    ("anthem", false),
    ("neighbor", true),
    ("mascot", false),
    ("patron", true),
    ("motto", false),
    ("color", false),
    ("flower", false),
    ("festival", false),
    ("harbor", false),
    ("mountain", false),
    ("dish", false),
    ("instrument", false),
];

pub const DEFAULT_SENTENCE: &str = "the {relation} of {subject} is {object}";

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    /// Entities that queries are asked about.
    pub n_entities: usize,
    /// Size of the relation vocabulary drawn from [`RELATIONS`].
    pub n_relations: usize,
    pub facts_per_entity: usize,
    /// Extra entities with their own documents that are never queried.
    pub distractor_pool_size: usize,
    /// Two-hop queries added, as a fraction of the single-hop count.
    pub multi_hop_fraction: f64,
    /// Queries held out for evaluation; the rest are for training.
    pub n_eval_queries: usize,
    pub seed: u64,
    /// Fact sentence pattern with `{subject}`, `{relation}`, `{object}` slots.
    pub sentence: String,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_entities: 100,
            n_relations: 20,
            facts_per_entity: 4,
            distractor_pool_size: 40,
            multi_hop_fraction: 0.1,
            n_eval_queries: 120,
            seed: 7,
            sentence: DEFAULT_SENTENCE.to_string(),
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let gen = |m: String| Err(NritError::Generation(m));
        if self.n_entities == 0 || self.facts_per_entity == 0 {
            return gen("need at least one entity and one fact per entity".into());
        }
        if self.n_relations == 0 || self.n_relations > RELATIONS.len() {
            return gen(format!("n_relations must be in 1..={}", RELATIONS.len()));
        }
        if self.facts_per_entity > self.n_relations {
            return gen(format!(
                "{} facts per entity need as many distinct relations, only {} available",
                self.facts_per_entity, self.n_relations
            ));
        }
        let entity_valued = RELATIONS[..self.n_relations].iter().any(|r| r.1);
        if entity_valued && (self.n_entities < 2 || (self.distractor_pool_size == 1)) {
            return gen("entity-valued relations need at least two entities per pool".into());
        }
        if !(0.0..=1.0).contains(&self.multi_hop_fraction) {
            return gen("multi_hop_fraction must lie in [0, 1]".into());
        }
        for slot in ["{subject}", "{relation}", "{object}"] {
            if self.sentence.matches(slot).count() != 1 {
                return gen(format!("sentence template must contain {slot} exactly once"));
            }
        }
        if self.sentence.contains('.') {
            return gen("sentence template may not contain '.'".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fact {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    /// Sentences without terminal punctuation.
    pub sentences: Vec<String>,
    pub subjects: BTreeSet<String>,
}

impl Document {
    /// Sentences joined by `". "` with a final period.
    pub fn text(&self) -> String {
        let mut out = self.sentences.join(". ");
        out.push('.');
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub docs: Vec<Document>,
}

impl Corpus {
    pub fn get(&self, id: &str) -> Option<&Document> {
        self.docs
            .binary_search_by(|d| d.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.docs[i])
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// One document per line: `id<TAB>text`, in id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for d in &self.docs {
            let _ = writeln!(out, "{}\t{}", d.id, d.text());
        }
        out
    }

    /// Parses [`Self::to_tsv`] output. Subject sets are not stored in the
    /// file and come back empty.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut docs = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let (id, body) = line
                .split_once('\t')
                .ok_or_else(|| NritError::format("corpus", format!("line {} has no tab", no + 1)))?;
            let body = body.strip_suffix('.').unwrap_or(body);
            docs.push(Document {
                id: id.to_string(),
                sentences: body.split(". ").map(str::to_string).collect(),
                subjects: BTreeSet::new(),
            });
        }
        docs.sort_by(|a, b| a.id.cmp(&b.id));
        if docs.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(NritError::format("corpus", "duplicate document id"));
        }
        Ok(Corpus { docs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    /// Copy without the listed documents.
    pub fn without(&self, ids: &BTreeSet<String>) -> Corpus {
        Corpus {
            docs: self.docs.iter().filter(|d| !ids.contains(&d.id)).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub id: String,
    pub text: String,
    pub gold_answers: Vec<String>,
    /// Indices into [`World::facts`], in reasoning order.
    pub chain: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub facts: Vec<Fact>,
    pub corpus: Corpus,
    pub train: Vec<Query>,
    pub eval: Vec<Query>,
}

impl World {
    pub fn queries(&self) -> impl Iterator<Item = &Query> {
        self.train.iter().chain(&self.eval)
    }

    /// All text the tokenizer must cover: documents, queries and answers.
    pub fn texts(&self) -> Vec<String> {
        let mut out: Vec<String> = self.corpus.docs.iter().map(Document::text).collect();
        for q in self.queries() {
            out.push(q.text.clone());
            out.extend(q.gold_answers.iter().cloned());
        }
        out
    }
}

struct Namer {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl Namer {
    const ONSETS: &'static [&'static str] = &[
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "gl", "kr", "st", "th",
    ];
    const VOWELS: &'static [&'static str] = &["a", "e", "i", "o", "u", "ai", "ou"];
    const CODAS: &'static [&'static str] = &["", "", "", "n", "r", "l", "sh", "k"];

    fn new(seed: u64) -> Self {
        let mut used: HashSet<String> = template_words().into_iter().collect();
        used.extend(STOPWORDS.iter().map(|s| s.to_string()));
        used.extend(RELATIONS.iter().map(|r| r.0.to_string()));
        Namer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            used,
        }
    }

    fn fresh(&mut self, syllables: usize) -> String {
        loop {
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(Self::ONSETS[self.rng.random_range(0..Self::ONSETS.len())]);
                w.push_str(Self::VOWELS[self.rng.random_range(0..Self::VOWELS.len())]);
            }
            w.push_str(Self::CODAS[self.rng.random_range(0..Self::CODAS.len())]);
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn render(template: &str, f: &Fact) -> String {
    template
        .replace("{subject}", &f.subject)
        .replace("{relation}", &f.relation)
        .replace("{object}", &f.object)
}

/// Builds the world. Queried entities own one document each, as do the
/// distractor entities; document ids are assigned in a seeded order so
/// distractors interleave with queried entities.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut namer = Namer::new(spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_f00d);
    let n_all = spec.n_entities + spec.distractor_pool_size;
    let names: Vec<String> = (0..n_all).map(|_| namer.fresh(2)).collect();
    let relations = &RELATIONS[..spec.n_relations];

    let mut facts = Vec::new();
    // facts[e] indices per entity, entity order
    let mut owned: Vec<Vec<usize>> = Vec::with_capacity(n_all);
    for e in 0..n_all {
        let (lo, hi) = if e < spec.n_entities {
            (0, spec.n_entities)
        } else {
            (spec.n_entities, n_all)
        };
        let mut rels: Vec<usize> = (0..relations.len()).collect();
        rels.shuffle(&mut rng);
        let mut mine = Vec::new();
        for &r in &rels[..spec.facts_per_entity] {
            let (rel, entity_valued) = relations[r];
            let object = if entity_valued {
                let mut o = rng.random_range(lo..hi - 1);
                if o >= e {
                    o += 1;
                }
                names[o].clone()
            } else {
                namer.fresh(3)
            };
            mine.push(facts.len());
            facts.push(Fact {
                subject: names[e].clone(),
                relation: rel.to_string(),
                object,
            });
        }
        owned.push(mine);
    }

    let mut order: Vec<usize> = (0..n_all).collect();
    order.shuffle(&mut rng);
    let width = n_all.to_string().len().max(4);
    let mut docs: Vec<Document> = order
        .iter()
        .enumerate()
        .map(|(slot, &e)| Document {
            id: format!("doc-{slot:0width$}"),
            sentences: owned[e].iter().map(|&f| render(&spec.sentence, &facts[f])).collect(),
            subjects: BTreeSet::from([names[e].clone()]),
        })
        .collect();
    docs.sort_by(|a, b| a.id.cmp(&b.id));

    let question = |chain: &[usize]| {
        let mut q = String::from("what is");
        for &f in chain.iter().rev() {
            q.push_str(&format!(" the {} of", facts[f].relation));
        }
        format!("{q} {}?", facts[chain[0]].subject)
    };
    let mut chains: Vec<Vec<usize>> = owned[..spec.n_entities].iter().flatten().map(|&f| vec![f]).collect();
    let mut two_hop: Vec<Vec<usize>> = Vec::new();
    for e in 0..spec.n_entities {
        for &f in &owned[e] {
            if let Some(mid) = names[..spec.n_entities].iter().position(|n| *n == facts[f].object) {
                for &g in &owned[mid] {
                    two_hop.push(vec![f, g]);
                }
            }
        }
    }
    two_hop.shuffle(&mut rng);
    let n_multi = ((chains.len() as f64) * spec.multi_hop_fraction).round() as usize;
    chains.extend(two_hop.into_iter().take(n_multi));

    let width = chains.len().to_string().len().max(4);
    let mut queries: Vec<Query> = chains
        .into_iter()
        .enumerate()
        .map(|(i, chain)| Query {
            id: format!("q-{i:0width$}"),
            text: question(&chain),
            gold_answers: vec![facts[*chain.last().expect("nonempty")].object.clone()],
            chain,
        })
        .collect();
    if spec.n_eval_queries >= queries.len() {
        return Err(NritError::Generation(format!(
            "{} evaluation queries requested from {} queries",
            spec.n_eval_queries,
            queries.len()
        )));
    }
    queries.shuffle(&mut rng);
    let train = queries.split_off(spec.n_eval_queries);
    let mut eval = queries;
    let mut train = train;
    eval.sort_by(|a, b| a.id.cmp(&b.id));
    train.sort_by(|a, b| a.id.cmp(&b.id));

    let world = World {
        spec: spec.clone(),
        facts,
        corpus: Corpus { docs },
        train,
        eval,
    };
    check_unique_answers(&world)?;
    Ok(world)
}

/// Every query's chain must resolve to exactly one object and the gold
/// answer must occur in some document.
fn check_unique_answers(world: &World) -> Result<()> {
    for q in world.queries() {
        let mut subject = &world.facts[q.chain[0]].subject;
        let mut answer = None;
        for &f in &q.chain {
            let fact = &world.facts[f];
            let matches: Vec<&Fact> = world
                .facts
                .iter()
                .filter(|g| &g.subject == subject && g.relation == fact.relation)
                .collect();
            if matches.len() != 1 {
                return Err(NritError::Generation(format!("query {} is ambiguous", q.id)));
            }
            answer = Some(&matches[0].object);
            subject = &matches[0].object;
        }
        let answer = text::tokens(answer.expect("nonempty chain"));
        let present = world
            .corpus
            .docs
            .iter()
            .any(|d| super::contains_tokens(&text::tokens(&d.text()), &answer));
        if !present {
            return Err(NritError::Generation(format!("answer of {} is in no document", q.id)));
        }
    }
    Ok(())
}
