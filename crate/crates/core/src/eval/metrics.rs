use std::collections::HashMap;

use crate::corpus::Document;
use crate::gateway::INSUFFICIENT_INFORMATION;

/// Lowercase, drop ASCII punctuation, drop the articles `a`, `an`, `the`,
/// collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn normalized_tokens(s: &str) -> Vec<String> {
    normalize_answer(s).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

pub fn exact_match(pred: &str, golds: &[String]) -> u8 {
    let p = normalize_answer(pred);
    u8::from(golds.iter().any(|g| normalize_answer(g) == p))
}

fn f1_single(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(n) = counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best token-level F1 against any gold answer.
pub fn f1_score(pred: &str, golds: &[String]) -> f64 {
    let p = normalized_tokens(pred);
    golds
        .iter()
        .map(|g| f1_single(&p, &normalized_tokens(g)))
        .fold(0.0, f64::max)
}

/// True when the normalized answer is not a contiguous token run of any
/// document's normalized text. Abstentions are never flagged.
pub fn hallucination_flag(answer: &str, docs: &[&Document]) -> bool {
    let needle = normalized_tokens(answer);
    if needle.is_empty() || needle == normalized_tokens(INSUFFICIENT_INFORMATION) {
        return false;
    }
    !docs.iter().any(|d| {
        let hay = normalized_tokens(&format!("{}\n{}", d.title, d.text));
        hay.windows(needle.len()).any(|w| w == needle.as_slice())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn golds(g: &[&str]) -> Vec<String> {
        g.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("The Answer."), "answer");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("an  apple"), "apple");
        assert_eq!(normalize_answer("The 321 C"), "321 c");
    }

    #[test]
    fn f1_partial_overlap() {
        assert!((f1_score("the cat sat", &golds(&["cat sat down"])) - 0.8).abs() < 1e-12);
        assert_eq!(f1_score("", &golds(&[""])), 1.0);
        assert_eq!(f1_score("x", &golds(&["the"])), 0.0);
        assert_eq!(f1_score("dog", &golds(&["cat"])), 0.0);
    }

    fn doc(text: &str) -> Document {
        Document {
            id: "d".into(),
            title: String::new(),
            text: text.into(),
            source_kind: Default::default(),
            timestamp: None,
            metadata: Default::default(),
        }
    }

    #[test]
    fn hallucination_examples() {
        let d = doc("The melting point of cadmium is 321 C.");
        assert!(!hallucination_flag("321 c", &[&d]));
        assert!(hallucination_flag("999 c", &[&d]));
        assert!(!hallucination_flag("insufficient information", &[&d]));
        assert!(!hallucination_flag("Insufficient information.", &[]));
        assert!(hallucination_flag("321 c", &[]));
    }

    proptest! {
        #[test]
        fn em_implies_full_f1(a in "[a-c .,]{0,12}", b in "[a-c .,]{0,12}") {
            let g = vec![b];
            if exact_match(&a, &g) == 1 {
                prop_assert_eq!(f1_score(&a, &g), 1.0);
            }
            let f = f1_score(&a, &g);
            prop_assert!((0.0..=1.0).contains(&f));
        }

        #[test]
        fn self_f1_is_one(a in "[a-z]{1,6}( [a-z]{1,6}){0,4}") {
            prop_assert_eq!(f1_score(&a, std::slice::from_ref(&a)), 1.0);
        }
    }
}
