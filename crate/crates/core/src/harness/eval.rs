use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::LayerDensity;
use crate::data::{Corpus, PromptKind, QaInstance};
use crate::error::{NritError, Result};
use crate::model::{MicroTransformer, TokenId, Tokenizer};
use crate::tuning::document_prompt;

use super::metric::{is_no_evidence, match_metric};

/// Anything that continues a prompt greedily.
pub trait Generator: Sync {
    fn generate(&self, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>>;

    /// Context limit; generation length is clipped to fit inside it.
    fn max_seq_len(&self) -> usize;
}

impl Generator for MicroTransformer {
    fn generate(&self, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        self.generate_greedy(prompt, max_new)
    }

    fn max_seq_len(&self) -> usize {
        self.config().max_seq_len
    }
}

/// Which part of a QA set to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    All,
    AnswerPresent,
    AnswerAbsent,
}

impl Split {
    pub fn admits(self, inst: &QaInstance) -> bool {
        match self {
            Split::All => true,
            Split::AnswerPresent => inst.answer_present,
            Split::AnswerAbsent => !inst.answer_present,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub id: String,
    pub answer_present: bool,
    pub output: String,
    #[serde(rename = "match")]
    pub matched: bool,
    pub no_evidence: bool,
}

/// Count of hits out of `n`; `None` rates for empty splits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub n: usize,
    pub matched: usize,
    pub no_evidence: usize,
}

impl Tally {
    fn add(&mut self, g: &Generation) {
        self.n += 1;
        self.matched += usize::from(g.matched);
        self.no_evidence += usize::from(g.no_evidence);
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.n > 0).then(|| self.matched as f64 / self.n as f64)
    }

    pub fn no_evidence_rate(&self) -> Option<f64> {
        (self.n > 0).then(|| self.no_evidence as f64 / self.n as f64)
    }
}

/// Match accuracy by split plus run metadata, stored as key=value lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub seed: u64,
    pub all: Tally,
    pub present: Tally,
    pub absent: Tally,
    /// Trainable fraction of the evaluated model's last tuning stage.
    pub trainable_fraction: Option<f64>,
    pub density: Vec<LayerDensity>,
}

/// Greedy-generates an answer for every admitted instance with the
/// dual-instruction prompt. Output order follows `qa`.
pub fn generate_answers(
    generator: &dyn Generator,
    tokenizer: &Tokenizer,
    corpus: &Corpus,
    qa: &[QaInstance],
    split: Split,
    max_new: usize,
) -> Result<Vec<Generation>> {
    qa.par_iter()
        .filter(|q| split.admits(q))
        .map(|q| {
            if q.gold_answers.is_empty() {
                return Err(NritError::Contract(format!("{} has no gold answers", q.id)));
            }
            let prompt = document_prompt(tokenizer, corpus, PromptKind::QaInference, &q.question, &q.doc_ids)?;
            let room = generator.max_seq_len().saturating_sub(prompt.len());
            let ids = generator.generate(&prompt, max_new.min(room))?;
            let output = tokenizer.decode(&ids);
            Ok(Generation {
                id: q.id.clone(),
                answer_present: q.answer_present,
                matched: match_metric(&output, &q.gold_answers) == 1,
                no_evidence: is_no_evidence(&output),
                output,
            })
        })
        .collect()
}

pub fn tally(generations: &[Generation]) -> (Tally, Tally, Tally) {
    let (mut all, mut present, mut absent) = (Tally::default(), Tally::default(), Tally::default());
    for g in generations {
        all.add(g);
        if g.answer_present {
            present.add(g);
        } else {
            absent.add(g);
        }
    }
    (all, present, absent)
}

/// Scores `qa` on one split.
pub fn evaluate(
    generator: &dyn Generator,
    tokenizer: &Tokenizer,
    corpus: &Corpus,
    qa: &[QaInstance],
    split: Split,
    max_new: usize,
) -> Result<(EvalReport, Vec<Generation>)> {
    let gens = generate_answers(generator, tokenizer, corpus, qa, split, max_new)?;
    let (all, present, absent) = tally(&gens);
    Ok((
        EvalReport {
            all,
            present,
            absent,
            ..EvalReport::default()
        },
        gens,
    ))
}

fn rate(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x:?}"))
}

impl EvalReport {
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("label", self.label.clone());
        put("seed", self.seed.to_string());
        for (name, t) in [("all", &self.all), ("present", &self.present), ("absent", &self.absent)] {
            put(&format!("{name}.n"), t.n.to_string());
            put(&format!("{name}.matched"), t.matched.to_string());
            put(&format!("{name}.no_evidence"), t.no_evidence.to_string());
            put(&format!("{name}.accuracy"), rate(t.accuracy()));
            put(&format!("{name}.no_evidence_rate"), rate(t.no_evidence_rate()));
        }
        put("trainable_fraction", rate(self.trainable_fraction));
        for d in &self.density {
            put(&format!("density.{}", d.layer), format!("{},{},{}", d.rel, d.irrel, d.shared));
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let bad = |d: String| NritError::format("eval report", d);
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line {line:?} has no '='")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| map.get(k).ok_or_else(|| bad(format!("missing {k}")));
        fn num<T: FromStr>(raw: &str, key: &str) -> Result<T> {
            raw.parse()
                .map_err(|_| NritError::format("eval report", format!("bad value for {key}: {raw:?}")))
        }
        let tally = |name: &str| -> Result<Tally> {
            let t = Tally {
                n: num(get(&format!("{name}.n"))?, name)?,
                matched: num(get(&format!("{name}.matched"))?, name)?,
                no_evidence: num(get(&format!("{name}.no_evidence"))?, name)?,
            };
            if t.matched > t.n || t.no_evidence > t.n {
                return Err(bad(format!("{name} counts exceed its size")));
            }
            Ok(t)
        };
        let fraction = match get("trainable_fraction")?.as_str() {
            "absent" => None,
            raw => Some(num(raw, "trainable_fraction")?),
        };
        let mut density = Vec::new();
        for layer in 0.. {
            let Some(raw) = map.get(&format!("density.{layer}")) else { break };
            let f: Vec<usize> = raw
                .split(',')
                .map(|x| num(x, "density"))
                .collect::<Result<_>>()?;
            if f.len() != 3 {
                return Err(bad(format!("density.{layer} needs three counts")));
            }
            density.push(LayerDensity {
                layer,
                rel: f[0],
                irrel: f[1],
                shared: f[2],
            });
        }
        let report = EvalReport {
            label: get("label")?.clone(),
            seed: num(get("seed")?, "seed")?,
            all: tally("all")?,
            present: tally("present")?,
            absent: tally("absent")?,
            trainable_fraction: fraction,
            density,
        };
        if report.present.n + report.absent.n != report.all.n {
            return Err(bad("split sizes do not add up".into()));
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&std::fs::read_to_string(path)?)
    }
}
