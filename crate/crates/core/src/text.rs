//! Text normalisation shared by the tokenizer, retriever and metric.

/// Lowercases, removes ASCII punctuation, and collapses whitespace runs to
/// single spaces.
pub fn normalize(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Normalised whitespace tokens.
pub fn tokens(text: &str) -> Vec<String> {
    normalize(text).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_case_punctuation_and_spacing() {
        assert_eq!(normalize("  The answer is Paris. "), "the answer is paris");
        assert_eq!(normalize("Document 1:\tfoo-bar"), "document 1 foobar");
        assert_eq!(tokens("New  York City"), vec!["new", "york", "city"]);
        assert!(tokens("?!").is_empty());
    }
}
