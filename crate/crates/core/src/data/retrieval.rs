//! Lexical-overlap retriever.

use std::collections::BTreeSet;

use crate::text;

use super::world::Corpus;

/// Function words ignored when scoring overlap.
pub const STOPWORDS: [&str; 24] = [
    "a", "an", "and", "are", "as", "at", "by", "for", "from", "how", "in", "is", "it", "of", "on", "or", "that",
    "the", "to", "was", "what", "which", "who", "with",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Retrieved {
    pub doc_id: String,
    pub score: usize,
}

/// Distinct normalised non-stopword tokens.
pub fn content_tokens(s: &str) -> BTreeSet<String> {
    text::tokens(s)
        .into_iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

/// Corpus with per-document token sets precomputed.
#[derive(Debug, Clone)]
pub struct Retriever<'c> {
    corpus: &'c Corpus,
    doc_tokens: Vec<BTreeSet<String>>,
}

impl<'c> Retriever<'c> {
    pub fn new(corpus: &'c Corpus) -> Self {
        Retriever {
            corpus,
            doc_tokens: corpus.docs.iter().map(|d| content_tokens(&d.text())).collect(),
        }
    }

    pub fn corpus(&self) -> &'c Corpus {
        self.corpus
    }

    /// Scores every document by the number of distinct query tokens it
    /// shares, keeps the best `top_n` and returns the first `top_k` of those.
    /// Ties go to the lexicographically smaller document id.
    pub fn retrieve(&self, query: &str, top_n: usize, top_k: usize) -> Vec<Retrieved> {
        let q = content_tokens(query);
        let mut scored: Vec<(usize, usize)> = self
            .doc_tokens
            .iter()
            .enumerate()
            .map(|(i, toks)| (q.intersection(toks).count(), i))
            .collect();
        // corpus docs are id-sorted, so index order is id order
        scored.sort_by(|a, b| b.0.cmp(&a.0).then(self.corpus.docs[a.1].id.cmp(&self.corpus.docs[b.1].id)));
        scored.truncate(top_n);
        scored.truncate(top_k);
        scored
            .into_iter()
            .map(|(score, i)| Retrieved {
                doc_id: self.corpus.docs[i].id.clone(),
                score,
            })
            .collect()
    }

    /// Every document in retrieval order.
    pub fn rank_all(&self, query: &str) -> Vec<Retrieved> {
        self.retrieve(query, usize::MAX, usize::MAX)
    }
}

pub fn retrieve(query: &str, corpus: &Corpus, top_n: usize, top_k: usize) -> Vec<Retrieved> {
    Retriever::new(corpus).retrieve(query, top_n, top_k)
}
