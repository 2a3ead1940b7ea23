use super::{PrunedDocument, Vocabulary};
use crate::corpus::tokenize;
use crate::{Error, Result};

/// Number of special tokens around question and context: `[CLS] q [SEP] c [SEP]`.
pub const SPECIAL_TOKENS: usize = 3;

/// One encoder input: `[CLS] question [SEP] window [SEP]` padded to `L_x`,
/// with its distant-supervision labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub instance_id: String,
    pub index: usize,
    /// Offset of the window's first token inside the pruned document.
    pub window_start: usize,
    pub input_ids: Vec<u32>,
    pub type_ids: Vec<u8>,
    /// Inclusive positions of the context tokens inside `input_ids`.
    pub context_span: (usize, usize),
    pub context_tokens: Vec<String>,
    /// True when the window holds at least one exact gold match.
    pub is_positive: bool,
    pub start_labels: Vec<u8>,
    pub end_labels: Vec<u8>,
    /// Every matched gold occurrence as inclusive input positions, in scan order.
    pub answer_spans: Vec<(usize, usize)>,
}

impl Segment {
    pub fn seq_len(&self) -> usize {
        self.input_ids.len()
    }

    /// Count of non-PAD positions; they always form a prefix.
    pub fn valid_len(&self) -> usize {
        self.context_span.1 + 2
    }

    /// One-hot retrieval label, positive class first.
    pub fn retrieval_label(&self) -> [f64; 2] {
        if self.is_positive {
            [1.0, 0.0]
        } else {
            [0.0, 1.0]
        }
    }

    /// Maps an input position inside the context span to a pruned-document token index.
    pub fn doc_offset(&self, pos: usize) -> usize {
        self.window_start + pos - self.context_span.0
    }

    /// Normalized tokens of an input span.
    pub fn span_tokens(&self, start: usize, end: usize) -> &[String] {
        &self.context_tokens[start - self.context_span.0..=end - self.context_span.0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputSequence {
    pub input_ids: Vec<u32>,
    pub type_ids: Vec<u8>,
    pub context_span: (usize, usize),
}

pub fn build_input_sequence<S: AsRef<str>, T: AsRef<str>>(
    question: &[S],
    context: &[T],
    max_seq_len: usize,
    vocab: &Vocabulary,
) -> Result<InputSequence> {
    if context.is_empty() {
        return Err(Error::InvalidInput("empty context window".into()));
    }
    let used = question.len() + context.len() + SPECIAL_TOKENS;
    if used > max_seq_len {
        return Err(Error::InvalidInput(format!(
            "question ({}) and context ({}) need {used} positions, only {max_seq_len} available",
            question.len(),
            context.len()
        )));
    }
    let mut ids = Vec::with_capacity(max_seq_len);
    let mut types = Vec::with_capacity(max_seq_len);
    ids.push(Vocabulary::CLS_ID);
    ids.extend(question.iter().map(|t| vocab.id(t.as_ref())));
    ids.push(Vocabulary::SEP_ID);
    types.resize(ids.len(), 0);
    let first = ids.len();
    ids.extend(context.iter().map(|t| vocab.id(t.as_ref())));
    let last = ids.len() - 1;
    ids.push(Vocabulary::SEP_ID);
    types.resize(ids.len(), 1);
    ids.resize(max_seq_len, Vocabulary::PAD_ID);
    types.resize(max_seq_len, 0);
    Ok(InputSequence {
        input_ids: ids,
        type_ids: types,
        context_span: (first, last),
    })
}

/// Window start offsets for a document of `doc_len` tokens:
/// `n = ceil((doc_len - window) / stride) + 1` windows when the document is
/// longer than one window, otherwise one.
pub fn window_starts(doc_len: usize, window: usize, stride: usize) -> Vec<usize> {
    let n = if doc_len > window {
        (doc_len - window).div_ceil(stride) + 1
    } else {
        1
    };
    (0..n).map(|i| i * stride).collect()
}

/// Slides windows of `L_x - L_q - 3` tokens with the given stride over the
/// pruned document and assembles one unlabeled segment per window.
pub fn segmentize(
    doc: &PrunedDocument,
    question: &[String],
    max_seq_len: usize,
    stride: usize,
    vocab: &Vocabulary,
) -> Result<Vec<Segment>> {
    if doc.tokens.is_empty() {
        return Err(Error::InvalidInput(format!(
            "pruned document of `{}` is empty",
            doc.instance_id
        )));
    }
    let window = max_seq_len
        .checked_sub(question.len() + SPECIAL_TOKENS)
        .filter(|&w| w >= 1)
        .ok_or_else(|| {
            Error::InvalidInput(format!(
                "question of {} tokens leaves no room in L_x = {max_seq_len}",
                question.len()
            ))
        })?;
    if stride == 0 || stride > window {
        return Err(Error::Config(format!(
            "stride {stride} must lie in [1, {window}]"
        )));
    }
    window_starts(doc.tokens.len(), window, stride)
        .into_iter()
        .enumerate()
        .map(|(index, start)| {
            let end = (start + window).min(doc.tokens.len());
            let context = &doc.tokens[start..end];
            let seq = build_input_sequence(question, context, max_seq_len, vocab)?;
            Ok(Segment {
                instance_id: doc.instance_id.clone(),
                index,
                window_start: start,
                start_labels: vec![0; max_seq_len],
                end_labels: vec![0; max_seq_len],
                input_ids: seq.input_ids,
                type_ids: seq.type_ids,
                context_span: seq.context_span,
                context_tokens: context.to_vec(),
                is_positive: false,
                answer_spans: Vec::new(),
            })
        })
        .collect()
}

/// Marks every context run equal to a normalized gold answer. Windows with
/// no match get the no-answer label at position 0.
pub fn label_segment<S: AsRef<str>>(segment: &mut Segment, gold_answers: &[S]) {
    let len = segment.seq_len();
    segment.start_labels = vec![0; len];
    segment.end_labels = vec![0; len];
    segment.answer_spans.clear();
    let first = segment.context_span.0;
    for gold in gold_answers {
        let gold = tokenize(gold.as_ref());
        if gold.is_empty() || gold.len() > segment.context_tokens.len() {
            continue;
        }
        for (off, w) in segment.context_tokens.windows(gold.len()).enumerate() {
            if w == gold.as_slice() {
                let span = (first + off, first + off + gold.len() - 1);
                segment.start_labels[span.0] = 1;
                segment.end_labels[span.1] = 1;
                if !segment.answer_spans.contains(&span) {
                    segment.answer_spans.push(span);
                }
            }
        }
    }
    segment.answer_spans.sort_unstable();
    segment.is_positive = !segment.answer_spans.is_empty();
    if !segment.is_positive {
        segment.start_labels[0] = 1;
        segment.end_labels[0] = 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn doc_of(n: usize) -> PrunedDocument {
        PrunedDocument::from_paragraphs(
            "i",
            vec![(0, 0, (0..n).map(|i| format!("t{i}")).collect::<Vec<_>>().join(" "))],
        )
    }

    #[test]
    fn layout_rule() {
        let v = Vocabulary::from_tokens(["who", "won", "he"]);
        let s = build_input_sequence(&toks("who won"), &toks("he won"), 8, &v).unwrap();
        let (w, wo, he) = (v.id("who"), v.id("won"), v.id("he"));
        assert_eq!(s.input_ids, vec![2, w, wo, 3, he, wo, 3, 0]);
        assert_eq!(s.type_ids, vec![0, 0, 0, 0, 1, 1, 1, 0]);
        assert_eq!(s.context_span, (4, 5));
    }

    #[test]
    fn empty_context_and_oversize_rejected() {
        let v = Vocabulary::from_tokens(["a"]);
        assert!(build_input_sequence(&toks("a"), &Vec::<String>::new(), 8, &v).is_err());
        assert!(build_input_sequence(&toks("a a a"), &toks("a a a"), 8, &v).is_err());
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let v = Vocabulary::from_tokens(["a"]);
        let s = build_input_sequence(&toks("a"), &toks("zebra"), 6, &v).unwrap();
        assert_eq!(s.input_ids[3], Vocabulary::UNK_ID);
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_starts(384, 384, 128).len(), 1);
        assert_eq!(window_starts(640, 384, 128).len(), 3);
        assert_eq!(window_starts(385, 384, 128).len(), 2);
    }

    #[test]
    fn segmentize_pads_to_lx_and_repeats_question() {
        let v = Vocabulary::from_tokens(Vec::<String>::new());
        let q = toks("what is it");
        let segs = segmentize(&doc_of(30), &q, 16, 5, &v).unwrap();
        // window = 16 - 3 - 3 = 10
        assert_eq!(segs.len(), (30 - 10_usize).div_ceil(5) + 1);
        for s in &segs {
            assert_eq!(s.input_ids.len(), 16);
            assert_eq!(&s.input_ids[1..4], &segs[0].input_ids[1..4]);
        }
        assert!(segmentize(&doc_of(0), &q, 16, 5, &v).is_err());
    }

    #[test]
    fn paris_twice() {
        let v = Vocabulary::from_tokens(Vec::<String>::new());
        let d = PrunedDocument::from_paragraphs("i", vec![(0, 0, "paris is nice paris".into())]);
        let mut s = segmentize(&d, &toks("where"), 12, 1, &v).unwrap().remove(0);
        label_segment(&mut s, &["Paris"]);
        let c0 = s.context_span.0;
        assert!(s.is_positive);
        assert_eq!(s.answer_spans, vec![(c0, c0), (c0 + 3, c0 + 3)]);
        let ones = |v: &[u8]| v.iter().enumerate().filter(|(_, &x)| x == 1).map(|(i, _)| i).collect::<Vec<_>>();
        assert_eq!(ones(&s.start_labels), vec![c0, c0 + 3]);
        assert_eq!(ones(&s.end_labels), vec![c0, c0 + 3]);
    }

    #[test]
    fn no_answer_labels_position_zero() {
        let v = Vocabulary::from_tokens(Vec::<String>::new());
        let d = PrunedDocument::from_paragraphs("i", vec![(0, 0, "nothing here".into())]);
        let mut s = segmentize(&d, &toks("q"), 10, 1, &v).unwrap().remove(0);
        label_segment(&mut s, &["paris"]);
        assert!(!s.is_positive);
        assert_eq!(s.retrieval_label(), [0.0, 1.0]);
        assert_eq!(s.start_labels.iter().map(|&x| x as u32).sum::<u32>(), 1);
        assert_eq!((s.start_labels[0], s.end_labels[0]), (1, 1));
    }

    #[test]
    fn baby_buggy_single_pair() {
        let v = Vocabulary::from_tokens(Vec::<String>::new());
        let d = PrunedDocument::from_paragraphs(
            "i",
            vec![(0, 0, "maclaren made the folding baby buggy, a success".into())],
        );
        let mut s = segmentize(&d, &toks("what"), 16, 1, &v).unwrap().remove(0);
        label_segment(&mut s, &["baby buggy"]);
        assert_eq!(s.answer_spans.len(), 1);
        let (a, b) = s.answer_spans[0];
        assert_eq!(b, a + 1);
        assert_eq!(s.start_labels[0], 0);
    }

    /// Direct enumeration of windows: advance by `stride` until the window
    /// reaches the end of the document.
    fn enumerate_windows(doc_len: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        loop {
            let end = (start + window).min(doc_len);
            out.push((start, end));
            if end >= doc_len {
                break;
            }
            start += stride;
        }
        out
    }

    proptest! {
        #[test]
        fn windows_match_enumeration(doc_len in 1usize..600, window in 1usize..100, stride_frac in 0.0f64..1.0) {
            let stride = ((window as f64 * stride_frac) as usize).max(1);
            let starts = window_starts(doc_len, window, stride);
            let direct = enumerate_windows(doc_len, window, stride);
            prop_assert_eq!(starts.len(), direct.len());
            for (s, (d, _)) in starts.iter().zip(&direct) {
                prop_assert_eq!(*s, *d);
            }
            // overlap of consecutive full windows is window - stride
            for pair in direct.windows(2) {
                if pair[0].1 - pair[0].0 == window && pair[1].1 - pair[1].0 == window {
                    prop_assert_eq!(pair[0].1 - pair[1].0, window - stride);
                }
            }
            let mut covered = vec![false; doc_len];
            for (s, e) in direct { covered[s..e].iter_mut().for_each(|c| *c = true); }
            prop_assert!(covered.into_iter().all(|c| c));
        }

        #[test]
        fn labels_match_brute_force(
            words in proptest::collection::vec(0u8..4, 1..40),
            gold in proptest::collection::vec(0u8..4, 1..4),
        ) {
            let text: Vec<String> = words.iter().map(|w| format!("w{w}")).collect();
            let gold_text = gold.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ");
            let v = Vocabulary::from_tokens(Vec::<String>::new());
            let d = PrunedDocument::from_paragraphs("i", vec![(0, 0, text.join(" "))]);
            let mut s = segmentize(&d, &toks("q"), 64, 1, &v).unwrap().remove(0);
            label_segment(&mut s, std::slice::from_ref(&gold_text));
            let c0 = s.context_span.0;
            let g = toks(&gold_text);
            let mut brute = Vec::new();
            for a in 0..text.len() {
                for b in a..text.len().min(a + 8) {
                    if text[a..=b] == g[..] { brute.push((c0 + a, c0 + b)); }
                }
            }
            prop_assert_eq!(&s.answer_spans, &brute);
            let starts: u32 = s.start_labels[c0..].iter().map(|&x| x as u32).sum();
            let ends: u32 = s.end_labels.iter().map(|&x| x as u32).sum();
            prop_assert_eq!(s.is_positive, starts > 0);
            prop_assert_eq!(s.start_labels.iter().map(|&x| x as u32).sum::<u32>(), ends);
        }
    }
}
