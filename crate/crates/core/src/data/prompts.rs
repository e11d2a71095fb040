//! Prompt templates. Text is fed through [`crate::text::normalize`] before
//! tokenisation, so casing and punctuation here are cosmetic.

use crate::error::{NritError, Result};

pub const RSE_INSTRUCTION: &str = "extract relevant information from the provided documents";
pub const QA_INSTRUCTION: &str = "answer questions as briefly as possible";
/// Summary target used when no retrieved sentence bears on the query.
pub const NO_EVIDENCE: &str = "no relevant information is found in the documents";

/// Upper bound on documents in one prompt; the tokenizer covers their numbering.
pub const MAX_PROMPT_DOCUMENTS: usize = 50;

const BINARY_QUESTION: &str =
    "If the proposed answer can be derived by referring to the context, answer YES; otherwise, answer NO.\nThe correct answer is";
const SUMMARY_INSTRUCTION: &str = "Given a document and a query, reason step by step to identify only the parts of the document that are directly relevant to the query, and provide a concise summary of those relevant parts.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    /// Binary YES/NO derivability question over one context.
    Attribution,
    /// The attribution prompt with the context removed; IG baseline input.
    AttributionQueryOnly,
    /// Summary instruction over retrieved documents (denoising and relevant-summary training).
    Summary,
    /// Dual-instruction question answering.
    QaInference,
    /// Per-document instruction given to a summariser when building summaries.
    RsConstruction,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Slots<'a> {
    pub question: Option<&'a str>,
    pub context: Option<&'a str>,
    pub proposed_answer: Option<&'a str>,
    pub documents: Option<&'a [String]>,
}

fn need<'a>(slot: Option<&'a str>, name: &str, kind: PromptKind) -> Result<&'a str> {
    slot.ok_or_else(|| NritError::Template(format!("{kind:?} prompt is missing slot {name}")))
}

fn background(docs: &[String]) -> String {
    let mut out = String::from("Background:\n");
    for (i, d) in docs.iter().enumerate() {
        out.push_str(&format!("Document {}: {}\n", i + 1, d));
    }
    out
}

pub fn render_prompt(kind: PromptKind, slots: &Slots<'_>) -> Result<String> {
    let docs = || {
        slots
            .documents
            .filter(|d| !d.is_empty())
            .ok_or_else(|| NritError::Template(format!("{kind:?} prompt is missing slot documents")))
            .and_then(|d| {
                if d.len() > MAX_PROMPT_DOCUMENTS {
                    Err(NritError::Template(format!("{} documents exceed {MAX_PROMPT_DOCUMENTS}", d.len())))
                } else {
                    Ok(d)
                }
            })
    };
    Ok(match kind {
        PromptKind::Attribution => format!(
            "Context: {}\n\nQuestion: {}\n\nProposed Answer: {}\n{BINARY_QUESTION}",
            need(slots.context, "context", kind)?,
            need(slots.question, "question", kind)?,
            need(slots.proposed_answer, "proposed_answer", kind)?,
        ),
        PromptKind::AttributionQueryOnly => format!(
            "Question: {}\n\nProposed Answer: {}\n{BINARY_QUESTION}",
            need(slots.question, "question", kind)?,
            need(slots.proposed_answer, "proposed_answer", kind)?,
        ),
        PromptKind::Summary => format!(
            "User: {SUMMARY_INSTRUCTION}\n\n{}\nQuestion: {}\nAssistant:",
            background(docs()?),
            need(slots.question, "question", kind)?,
        ),
        PromptKind::QaInference => format!(
            "System: You are a helpful assistant. Your task is to {RSE_INSTRUCTION}\nand {QA_INSTRUCTION}.\nUser:\n{}\nQuestion: {}\nAssistant:",
            background(docs()?),
            need(slots.question, "question", kind)?,
        ),
        PromptKind::RsConstruction => format!(
            "Below is a document.\n\nYour task is to find and concisely summarize only the parts of the document that are directly relevant to the given query.\n\n\
             - Do not summarize the entire document.\n- Exclude any information that is not related to the query.\n- Focus only on the key points that are most relevant to the query.\n\n\
             Query: {}\n\nDocument:\n{}\n\n[Relevant Summary]\n",
            need(slots.question, "question", kind)?,
            need(slots.context, "context", kind)?,
        ),
    })
}

/// The fixed natural-language sentences of the templates, as plain text.
/// Warm-up language modelling covers them so every word a prompt or the
/// no-evidence reply uses has been a prediction target at least once.
pub fn instruction_texts() -> Vec<String> {
    vec![
        format!("You are a helpful assistant. Your task is to {RSE_INSTRUCTION} and {QA_INSTRUCTION}."),
        SUMMARY_INSTRUCTION.to_string(),
        BINARY_QUESTION.to_string(),
        format!("{}.", NO_EVIDENCE),
    ]
}

/// Every word any template contributes on its own, plus the no-evidence
/// sentence. Generated world vocabulary avoids these.
pub fn template_words() -> Vec<String> {
    let docs = vec!["x".to_string(); MAX_PROMPT_DOCUMENTS];
    let slots = Slots {
        question: Some("x"),
        context: Some("x"),
        proposed_answer: Some("x"),
        documents: Some(&docs),
    };
    let mut words: Vec<String> = [
        PromptKind::Attribution,
        PromptKind::AttributionQueryOnly,
        PromptKind::Summary,
        PromptKind::QaInference,
        PromptKind::RsConstruction,
    ]
    .iter()
    .flat_map(|&k| crate::text::tokens(&render_prompt(k, &slots).expect("all slots filled")))
    .chain(crate::text::tokens(NO_EVIDENCE))
    .filter(|w| w != "x")
    .collect();
    words.sort();
    words.dedup();
    words
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::normalize;

    fn docs() -> Vec<String> {
        (1..=5).map(|i| format!("the river of city{i} is ro{i}")).collect()
    }

    #[test]
    fn qa_prompt_carries_both_instructions() {
        let d = docs();
        let p = render_prompt(
            PromptKind::QaInference,
            &Slots {
                question: Some("what is the river of city1?"),
                documents: Some(&d),
                ..Default::default()
            },
        )
        .unwrap();
        let n = normalize(&p);
        assert!(n.contains("extract relevant information from the provided documents"));
        assert!(n.contains("answer questions as briefly as possible"));
        assert!(n.ends_with("question what is the river of city1 assistant"));
    }

    #[test]
    fn attribution_prompt_ends_with_the_cue() {
        let slots = Slots {
            question: Some("q"),
            context: Some("c"),
            proposed_answer: Some("a"),
            documents: None,
        };
        let p = render_prompt(PromptKind::Attribution, &slots).unwrap();
        assert!(p.ends_with("The correct answer is"));
        assert!(normalize(&p).starts_with("context c question q proposed answer a"));
        let q = render_prompt(PromptKind::AttributionQueryOnly, &slots).unwrap();
        assert!(!q.contains("Context"));
        assert!(q.ends_with("The correct answer is"));
    }

    #[test]
    fn missing_slots_are_template_errors() {
        let r = render_prompt(PromptKind::Summary, &Slots { question: Some("q"), ..Default::default() });
        assert!(matches!(r, Err(NritError::Template(_))));
        let r = render_prompt(PromptKind::Attribution, &Slots { question: Some("q"), ..Default::default() });
        assert!(matches!(r, Err(NritError::Template(m)) if m.contains("context")));
    }

    #[test]
    fn rendering_is_deterministic_and_distinguishes_documents() {
        let a = docs();
        let mut b = docs();
        b[4] = "the river of city9 is ro9".into();
        let slots = |d| Slots {
            question: Some("q"),
            documents: Some(d),
            ..Default::default()
        };
        let pa = render_prompt(PromptKind::Summary, &slots(&a)).unwrap();
        assert_eq!(pa, render_prompt(PromptKind::Summary, &slots(&a)).unwrap());
        assert_ne!(pa, render_prompt(PromptKind::Summary, &slots(&b)).unwrap());
    }

    #[test]
    fn template_words_cover_instructions() {
        let w = template_words();
        for t in ["assistant", "document", "background", "relevant", "no", "yes"] {
            assert!(w.binary_search(&t.to_string()).is_ok(), "{t}");
        }
    }
}
