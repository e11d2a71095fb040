//! Synthetic world, corpus, retriever, prompt templates and datasets.

mod datasets;
mod prompts;
mod retrieval;
mod world;

pub use datasets::{
    answer_bearing, build_attribution_sets, build_denoise_set, build_qa_set, build_rs_set, doc_texts, from_jsonl,
    oracle_summary, read_jsonl, to_jsonl, write_jsonl, AttributionInstance, AttributionSets, Built, ContextType,
    DataConfig, DenoiseInstance, DenoisePrompt, QaInstance, RsInstance, CHOICES,
};
pub use prompts::{instruction_texts, render_prompt, template_words, PromptKind, MAX_PROMPT_DOCUMENTS, Slots, NO_EVIDENCE, QA_INSTRUCTION, RSE_INSTRUCTION};
pub use retrieval::{content_tokens, retrieve, Retrieved, Retriever, STOPWORDS};
pub use world::{generate_world, Corpus, Document, Fact, Query, World, WorldSpec, DEFAULT_SENTENCE, RELATIONS};

/// True if `needle` occurs as a contiguous run in `hay`. An empty needle never matches.
pub fn contains_tokens(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}
