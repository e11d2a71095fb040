//! Token-level training examples for warm-up and both tuning stages.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    doc_texts, render_prompt, AttributionInstance, Corpus, DenoiseInstance, PromptKind, RsInstance, Slots,
};
use crate::error::{NritError, Result};
use crate::model::{TokenId, Tokenizer, BOS, EOT};

/// A token sequence whose loss covers targets `tokens[loss_from..]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub tokens: Vec<TokenId>,
    pub loss_from: usize,
}

impl TrainExample {
    /// `BOS prompt target`; only `target` carries loss.
    pub fn prompt_target(prompt: &[TokenId], target: &[TokenId]) -> Result<Self> {
        if target.is_empty() {
            return Err(NritError::Contract("training target is empty".into()));
        }
        let mut tokens = Vec::with_capacity(prompt.len() + target.len() + 1);
        tokens.push(BOS);
        tokens.extend_from_slice(prompt);
        let loss_from = tokens.len();
        tokens.extend_from_slice(target);
        Ok(TrainExample { tokens, loss_from })
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.tokens[..self.loss_from]
    }
}

/// Template used for relevant-summary training prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage2Prompt {
    /// Dual-instruction question-answering prompt, as used at inference.
    Qa,
    /// The summary prompt shared with stage 1.
    Summary,
}

impl Stage2Prompt {
    pub fn kind(self) -> PromptKind {
        match self {
            Stage2Prompt::Qa => PromptKind::QaInference,
            Stage2Prompt::Summary => PromptKind::Summary,
        }
    }
}

impl FromStr for Stage2Prompt {
    type Err = NritError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qa" => Ok(Stage2Prompt::Qa),
            "summary" => Ok(Stage2Prompt::Summary),
            other => Err(NritError::Config(format!("stage 2 prompt must be qa or summary, got {other:?}"))),
        }
    }
}

/// Prompt tokens (with leading BOS) for `kind` over documents from `corpus`.
pub fn document_prompt(
    tokenizer: &Tokenizer,
    corpus: &Corpus,
    kind: PromptKind,
    question: &str,
    doc_ids: &[String],
) -> Result<Vec<TokenId>> {
    let docs = doc_texts(corpus, doc_ids)?;
    let text = render_prompt(
        kind,
        &Slots {
            question: Some(question),
            documents: Some(&docs),
            ..Slots::default()
        },
    )?;
    let mut out = vec![BOS];
    out.extend(tokenizer.encode(&text)?);
    Ok(out)
}

/// Plain language modelling on one document: `BOS text EOT`.
pub fn document_example(tokenizer: &Tokenizer, text: &str) -> Result<TrainExample> {
    let mut target = tokenizer.encode(text)?;
    target.push(EOT);
    TrainExample::prompt_target(&[], &target)
}

/// Language modelling over packed documents: each of `orders` seeded
/// shuffles of `texts` is cut into sequences `BOS d1 EOT d2 EOT ...` of at
/// most `max_len` tokens, so training reaches every position a prompt can
/// occupy. A document longer than `max_len - 1` is an error.
pub fn packed_documents(
    tokenizer: &Tokenizer,
    texts: &[String],
    max_len: usize,
    orders: usize,
    seed: u64,
) -> Result<Vec<TrainExample>> {
    let docs: Vec<Vec<TokenId>> = texts
        .iter()
        .map(|t| {
            let mut ids = tokenizer.encode(t)?;
            ids.push(EOT);
            if ids.len() + 1 > max_len {
                return Err(NritError::Contract(format!("document of {} tokens exceeds {max_len}", ids.len())));
            }
            Ok(ids)
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..orders {
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.shuffle(&mut rng);
        let mut seq = vec![BOS];
        for i in order {
            if seq.len() + docs[i].len() > max_len {
                out.push(TrainExample { tokens: std::mem::replace(&mut seq, vec![BOS]), loss_from: 1 });
            }
            seq.extend_from_slice(&docs[i]);
        }
        if seq.len() > 1 {
            out.push(TrainExample { tokens: seq, loss_from: 1 });
        }
    }
    Ok(out)
}

/// Binary-task supervision: the gold choice token after the attribution prompt.
pub fn attribution_example(tokenizer: &Tokenizer, inst: &AttributionInstance) -> Result<TrainExample> {
    inst.validate()?;
    TrainExample::prompt_target(&tokenizer.encode(&inst.prompt()?)?, &[inst.gold_token()])
}

/// Stage-1 example: the summary prompt over the instance's documents, target EOT.
pub fn denoise_example(tokenizer: &Tokenizer, corpus: &Corpus, inst: &DenoiseInstance) -> Result<TrainExample> {
    let prompt = document_prompt(tokenizer, corpus, PromptKind::Summary, &inst.question, &inst.doc_ids)?;
    TrainExample::prompt_target(&prompt[1..], &[EOT])
}

/// Stage-2 example: the summary tokens followed by EOT.
pub fn rs_example(
    tokenizer: &Tokenizer,
    corpus: &Corpus,
    inst: &RsInstance,
    prompt: Stage2Prompt,
) -> Result<TrainExample> {
    let p = document_prompt(tokenizer, corpus, prompt.kind(), &inst.question, &inst.doc_ids)?;
    let mut target = tokenizer.encode(&inst.summary)?;
    target.push(EOT);
    TrainExample::prompt_target(&p[1..], &target)
}
