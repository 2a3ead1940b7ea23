//! From raw instances to labeled encoder inputs: paragraph merging, TF-IDF
//! pruning, sliding windows and distant-supervision labels.

mod segment;
mod tfidf;
mod vocab;

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_token, tokenize, Document, Instance, Question};
use crate::{Error, Result};

pub use segment::{
    build_input_sequence, label_segment, segmentize, window_starts, InputSequence, Segment,
    SPECIAL_TOKENS,
};
pub use tfidf::TfIdf;
pub use vocab::Vocabulary;

/// Greedy left-to-right fold of consecutive paragraphs while the running
/// token count stays within `threshold`.
pub fn merge_paragraphs(doc: &Document, threshold: usize) -> Document {
    let mut merged: Vec<String> = Vec::new();
    let mut acc = String::new();
    let mut acc_len = 0;
    for p in &doc.paragraphs {
        let len = tokenize(p).len();
        if !acc.is_empty() && acc_len + len > threshold {
            merged.push(std::mem::take(&mut acc));
            acc_len = 0;
        }
        if !acc.is_empty() {
            acc.push(' ');
        }
        acc.push_str(p);
        acc_len += len;
    }
    if !acc.is_empty() {
        merged.push(acc);
    }
    Document {
        id: doc.id.clone(),
        paragraphs: merged,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenOrigin {
    /// Index into [`PrunedDocument::paragraphs`].
    pub paragraph: usize,
    /// Token offset inside that paragraph.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedParagraph {
    pub document: usize,
    pub paragraph: usize,
    pub text: String,
}

/// The top-K paragraphs of an instance in source order, flattened to tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedDocument {
    pub instance_id: String,
    pub paragraphs: Vec<SelectedParagraph>,
    /// Normalized tokens.
    pub tokens: Vec<String>,
    /// The whitespace piece each token came from, before normalization.
    pub raw_tokens: Vec<String>,
    pub provenance: Vec<TokenOrigin>,
}

impl PrunedDocument {
    /// Concatenates `(document, paragraph, text)` triples in the given order.
    pub fn from_paragraphs(instance_id: &str, paragraphs: Vec<(usize, usize, String)>) -> Self {
        let mut pd = PrunedDocument {
            instance_id: instance_id.to_string(),
            paragraphs: Vec::with_capacity(paragraphs.len()),
            tokens: Vec::new(),
            raw_tokens: Vec::new(),
            provenance: Vec::new(),
        };
        for (pi, (document, paragraph, text)) in paragraphs.into_iter().enumerate() {
            let mut offset = 0;
            for piece in text.split_whitespace() {
                if let Some(tok) = normalize_token(piece) {
                    pd.tokens.push(tok);
                    pd.raw_tokens.push(piece.to_string());
                    pd.provenance.push(TokenOrigin { paragraph: pi, offset });
                    offset += 1;
                }
            }
            pd.paragraphs.push(SelectedParagraph {
                document,
                paragraph,
                text,
            });
        }
        pd
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Source text of an inclusive token range, with punctuation trimmed
    /// from the outer edges only.
    pub fn span_text(&self, start: usize, end: usize) -> String {
        let joined = self.raw_tokens[start..=end].join(" ");
        joined
            .trim_matches(|c: char| c.is_ascii_punctuation())
            .to_string()
    }
}

/// Keeps the `k` paragraphs nearest the question under per-instance TF-IDF
/// cosine distance, restores source order and concatenates them.
pub fn prune_document(question: &Question, docs: &[Document], k: usize) -> Result<PrunedDocument> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let flat: Vec<(usize, usize, &String)> = docs
        .iter()
        .enumerate()
        .flat_map(|(di, d)| d.paragraphs.iter().enumerate().map(move |(pi, p)| (di, pi, p)))
        .collect();
    if flat.is_empty() {
        return Err(Error::InvalidInput(format!(
            "instance `{}` has no paragraphs",
            question.id
        )));
    }
    let collection: Vec<Vec<String>> = flat.iter().map(|(_, _, p)| tokenize(p)).collect();
    let model = TfIdf::fit(&collection);
    let mut keep = model.nearest(&tokenize(&question.text), k);
    keep.sort_unstable();
    Ok(PrunedDocument::from_paragraphs(
        &question.id,
        keep.into_iter()
            .map(|i| (flat[i].0, flat[i].1, flat[i].2.clone()))
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub merge_threshold: usize,
    pub top_k_paragraphs: usize,
    pub max_seq_len: usize,
    pub stride: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            merge_threshold: 32,
            top_k_paragraphs: 6,
            max_seq_len: 64,
            stride: 24,
        }
    }
}

/// An instance after merging, pruning, windowing and labeling.
#[derive(Debug, Clone)]
pub struct PreparedInstance {
    pub question: Question,
    pub question_tokens: Vec<String>,
    pub document: PrunedDocument,
    pub segments: Vec<Segment>,
}

impl PreparedInstance {
    pub fn has_positive(&self) -> bool {
        self.segments.iter().any(|s| s.is_positive)
    }
}

pub fn prepare_instance(
    inst: &Instance,
    cfg: &PreprocessConfig,
    vocab: &Vocabulary,
) -> Result<PreparedInstance> {
    let merged: Vec<Document> = inst
        .documents
        .iter()
        .map(|d| merge_paragraphs(d, cfg.merge_threshold))
        .collect();
    let document = prune_document(&inst.question, &merged, cfg.top_k_paragraphs)?;
    let question_tokens = tokenize(&inst.question.text);
    let mut segments = segmentize(&document, &question_tokens, cfg.max_seq_len, cfg.stride, vocab)?;
    for s in &mut segments {
        label_segment(s, &inst.question.gold_answers);
    }
    Ok(PreparedInstance {
        question: inst.question.clone(),
        question_tokens,
        document,
        segments,
    })
}

pub fn prepare_all(
    instances: &[Instance],
    cfg: &PreprocessConfig,
    vocab: &Vocabulary,
) -> Result<Vec<PreparedInstance>> {
    instances
        .iter()
        .map(|i| prepare_instance(i, cfg, vocab))
        .collect()
}
