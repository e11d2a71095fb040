use std::collections::{BTreeSet, HashMap};

use crate::error::{NritError, Result};
use crate::text;

pub type TokenId = usize;

pub const BOS: TokenId = 0;
pub const EOT: TokenId = 1;
pub const PAD: TokenId = 2;
pub const YES: TokenId = 3;
pub const NO: TokenId = 4;

/// Special token spellings in id order. They contain `<`, which
/// normalisation strips, so no corpus word can collide with them.
pub const SPECIAL_TOKENS: [&str; 5] = ["<bos>", "<eot>", "<pad>", "<yes>", "<no>"];

/// Whitespace word-level tokenizer over normalised text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Tokenizer {
    /// Vocabulary: the special tokens, then every normalised word of `texts`
    /// in sorted order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(text::tokens).collect();
        let vocab = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_vocab(vocab).expect("specials first, words unique")
    }

    fn from_vocab(vocab: Vec<String>) -> Result<Self> {
        if vocab.len() < SPECIAL_TOKENS.len()
            || vocab.iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b)
        {
            return Err(NritError::format("tokenizer", "special tokens must come first in fixed order"));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(NritError::format("tokenizer", format!("bad token {w:?} on line {}", i + 1)));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(NritError::format("tokenizer", format!("duplicate token {w:?}")));
            }
        }
        Ok(Tokenizer { vocab, index })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text::tokens(text)
            .into_iter()
            .map(|w| self.id(&w).ok_or(NritError::Token(w)))
            .collect()
    }

    /// Joins tokens with single spaces; special tokens render by name.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the id is the zero-based line number.
    pub fn to_file_string(&self) -> String {
        let mut out = self.vocab.join("\n");
        out.push('\n');
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        Self::from_vocab(text.lines().map(str::to_string).collect())
    }
}
