//! The single normalization rule shared by labeling, retrieval and metrics:
//! lowercase, split on whitespace, strip punctuation from token edges.

use std::collections::BTreeMap;

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{2026}' | '\u{2013}' | '\u{2014}'
                | '\u{00AB}' | '\u{00BB}'
        )
}

/// Normalizes one whitespace-delimited piece. Returns `None` when nothing
/// but punctuation was left.
pub fn normalize_token(piece: &str) -> Option<String> {
    let trimmed = piece.trim_matches(is_punct);
    if trimmed.is_empty() {
        None
    } else {
        Some(trimmed.to_lowercase())
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().filter_map(normalize_token).collect()
}

/// True when `needle` occurs as a contiguous run inside `haystack`.
pub fn contains_run<S: AsRef<str>, T: AsRef<str>>(haystack: &[S], needle: &[T]) -> bool {
    !needle.is_empty()
        && haystack.len() >= needle.len()
        && haystack
            .windows(needle.len())
            .any(|w| w.iter().zip(needle).all(|(a, b)| a.as_ref() == b.as_ref()))
}

/// Bag-of-tokens F1 between two normalized token sequences. Two empty
/// sequences agree perfectly.
pub fn token_f1<S: AsRef<str>, T: AsRef<str>>(pred: &[S], gold: &[T]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: BTreeMap<&str, isize> = BTreeMap::new();
    for g in gold {
        *counts.entry(g.as_ref()).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_ref()) {
            if *c > 0 {
                *c -= 1;
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

/// Normalized-token equality.
pub fn exact_match<S: AsRef<str>, T: AsRef<str>>(pred: &[S], gold: &[T]) -> bool {
    pred.len() == gold.len() && pred.iter().zip(gold).all(|(a, b)| a.as_ref() == b.as_ref())
}
