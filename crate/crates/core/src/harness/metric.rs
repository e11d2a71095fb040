use crate::data::{contains_tokens, NO_EVIDENCE};
use crate::text;

/// 1 when some normalised gold answer occurs as a contiguous token run in
/// the normalised generation, else 0.
pub fn match_metric(generated: &str, gold_answers: &[String]) -> u8 {
    let hay = text::tokens(generated);
    u8::from(gold_answers.iter().any(|g| contains_tokens(&hay, &text::tokens(g))))
}

/// An empty generation (EOT first) or one stating the no-evidence sentence.
pub fn is_no_evidence(generated: &str) -> bool {
    let toks = text::tokens(generated);
    toks.is_empty() || contains_tokens(&toks, &text::tokens(NO_EVIDENCE))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gold(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn match_examples() {
        assert_eq!(match_metric("The answer is Paris.", &gold(&["paris"])), 1);
        assert_eq!(match_metric("", &gold(&["x"])), 0);
        assert_eq!(match_metric("New York City", &gold(&["york"])), 1);
        assert_eq!(match_metric("New York City", &gold(&["york new"])), 0);
        assert_eq!(match_metric("parisian", &gold(&["paris"])), 0);
        assert_eq!(match_metric("Rome or Paris", &gold(&["london", "PARIS!"])), 1);
    }

    #[test]
    fn no_evidence_detection() {
        assert!(is_no_evidence(""));
        assert!(is_no_evidence("No relevant information is found in the documents."));
        assert!(!is_no_evidence("the capital of zorba is keltu"));
    }
}
