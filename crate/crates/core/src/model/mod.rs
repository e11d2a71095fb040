//! The micro decoder-only transformer, its tokenizer, and activation probes.

mod tokenizer;
mod transformer;

pub use tokenizer::{TokenId, Tokenizer, BOS, EOT, NO, PAD, SPECIAL_TOKENS, YES};
pub use transformer::{
    argmax, ActivationProbe, ChoiceScope, FfnNames, KvCache, LogitRows, MicroTransformer, ModelConfig,
    ParamCount, ProbeContext,
};
