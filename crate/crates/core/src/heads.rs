//! The three task heads on top of the shared encoder.
//!
//! Every head works on one segment's rows `[L, D]` of a hidden state, so
//! callers slice a batch with [`EncoderState::segment`]. Backward functions
//! accumulate into a [`HeadParams`] gradient buffer and into `dh`, the
//! gradient of the same segment rows.
//!
//! [`EncoderState::segment`]: crate::encoder::EncoderState::segment

use std::cmp::Ordering;

use ndarray::{Array1, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::corpus::{exact_match, token_f1, tokenize};
use crate::encoder::HeadParams;
use crate::encoder::ops::{softmax_backward, softmax_inplace};
use crate::preprocess::Segment;
use crate::{Error, Real, Result};

/// Forward values of the retriever head kept for its backward pass.
#[derive(Debug, Clone)]
pub struct RetrieveOutput<F> {
    /// Self-alignment weights over the non-PAD prefix.
    pub mu: Vec<F>,
    pub pooled: Array1<F>,
    /// `tanh(pooled · W_r)`.
    pub hidden: Array1<F>,
    /// Logits, positive class first.
    pub scores: [F; 2],
}

impl<F: Real> RetrieveOutput<F> {
    /// Softmax probability of the positive class.
    pub fn probability(&self) -> F {
        let [a, b] = self.scores;
        F::one() / (F::one() + (b - a).exp())
    }
}

/// Self-aligned pooling over the first `valid_len` rows, then a tanh
/// projection to two logits.
pub fn retrieve_score<F: Real>(
    p: &HeadParams<F>,
    h: ArrayView2<'_, F>,
    valid_len: usize,
) -> Result<RetrieveOutput<F>> {
    if valid_len == 0 || valid_len > h.nrows() {
        return Err(Error::InvalidInput(format!(
            "retriever needs 1..={} non-PAD positions, got {valid_len}",
            h.nrows()
        )));
    }
    let rows = h.slice(ndarray::s![..valid_len, ..]);
    let mut mu = rows.dot(&p.retrieve_align).to_vec();
    softmax_inplace(&mut mu);
    let pooled = Array1::from(mu.clone()).dot(&rows);
    let hidden = pooled.dot(&p.retrieve_proj).mapv(F::tanh);
    let logits = hidden.dot(&p.retrieve_out);
    Ok(RetrieveOutput {
        mu,
        pooled,
        hidden,
        scores: [logits[0], logits[1]],
    })
}

pub fn retrieve_backward<F: Real>(
    p: &HeadParams<F>,
    h: ArrayView2<'_, F>,
    out: &RetrieveOutput<F>,
    d_scores: [F; 2],
    grads: &mut HeadParams<F>,
    mut dh: ArrayViewMut2<'_, F>,
) {
    let ds = Array1::from(d_scores.to_vec());
    for (i, &t) in out.hidden.iter().enumerate() {
        let mut row = grads.retrieve_out.row_mut(i);
        row.scaled_add(t, &ds);
    }
    let mut dz = p.retrieve_out.dot(&ds);
    dz.zip_mut_with(&out.hidden, |g, &t| *g *= F::one() - t * t);
    for (i, &x) in out.pooled.iter().enumerate() {
        grads.retrieve_proj.row_mut(i).scaled_add(x, &dz);
    }
    let dpooled = p.retrieve_proj.dot(&dz);
    let dmu: Vec<F> = out.mu.iter().enumerate().map(|(i, _)| h.row(i).dot(&dpooled)).collect();
    let da = softmax_backward(&out.mu, &dmu);
    for (i, (&m, &a)) in out.mu.iter().zip(&da).enumerate() {
        let mut row = dh.row_mut(i);
        row.scaled_add(m, &dpooled);
        row.scaled_add(a, &p.retrieve_align);
        grads.retrieve_align.scaled_add(a, &h.row(i));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    Train,
    Infer,
}

/// Indices of the top-`n` segments by positive probability, highest first,
/// ties to the lower index. In training mode a gold segment replaces the
/// least confident pick when none of the picks is gold.
pub fn select_segments(probs: &[f64], gold: &[bool], n: usize, mode: SelectMode) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = order.iter().copied().take(n).collect();
    if mode == SelectMode::Train && !keep.iter().any(|&i| gold[i]) {
        if let (Some(last), Some(&g)) = (keep.last_mut(), order.iter().find(|&&i| gold[i])) {
            *last = g;
        }
    }
    keep
}

/// Start and end logits at every position, with positions outside
/// `{0} ∪ context` set to negative infinity.
pub fn reader_scores<F: Real>(
    p: &HeadParams<F>,
    h: ArrayView2<'_, F>,
    context_span: (usize, usize),
) -> (Vec<F>, Vec<F>) {
    let mut s = h.dot(&p.start).to_vec();
    let mut e = h.dot(&p.end).to_vec();
    for (i, (a, b)) in s.iter_mut().zip(e.iter_mut()).enumerate() {
        if i != 0 && !(context_span.0..=context_span.1).contains(&i) {
            *a = F::neg_infinity();
            *b = F::neg_infinity();
        }
    }
    (s, e)
}

/// Masked positions must carry a zero gradient.
pub fn reader_backward<F: Real>(
    p: &HeadParams<F>,
    h: ArrayView2<'_, F>,
    d_start: &[F],
    d_end: &[F],
    grads: &mut HeadParams<F>,
    mut dh: ArrayViewMut2<'_, F>,
) {
    for (i, (&a, &b)) in d_start.iter().zip(d_end).enumerate() {
        if a == F::zero() && b == F::zero() {
            continue;
        }
        grads.start.scaled_add(a, &h.row(i));
        grads.end.scaled_add(b, &h.row(i));
        let mut row = dh.row_mut(i);
        row.scaled_add(a, &p.start);
        row.scaled_add(b, &p.end);
    }
}

/// A scored span of input positions, inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

fn by_score_then_position(a: &Span, b: &Span) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.cmp(&b.start))
        .then(a.end.cmp(&b.end))
}

/// Top-`m` spans inside the context by `score_s[α] + score_e[β]`.
#[allow(clippy::needless_range_loop)]
pub fn propose_candidates<F: Real>(
    score_s: &[F],
    score_e: &[F],
    context_span: (usize, usize),
    m: usize,
    max_len: usize,
) -> Vec<Span> {
    let (lo, hi) = context_span;
    let hi = hi.min(score_s.len().saturating_sub(1)).min(score_e.len().saturating_sub(1));
    let mut spans = Vec::new();
    if max_len == 0 || lo > hi {
        return spans;
    }
    for a in lo..=hi {
        for b in a..=hi.min(a + max_len - 1) {
            spans.push(Span {
                start: a,
                end: b,
                score: (score_s[a] + score_e[b]).as_f64(),
            });
        }
    }
    spans.sort_by(by_score_then_position);
    spans.truncate(m);
    spans
}

/// Greedy span-level non-maximum suppression: repeatedly keep the best
/// remaining span and drop every span sharing its start or its end.
pub fn span_nms(candidates: &[Span], m_star: usize) -> Vec<Span> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].score.total_cmp(&candidates[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Span> = Vec::new();
    for i in order {
        if kept.len() == m_star {
            break;
        }
        let c = candidates[i];
        if kept.iter().all(|k| k.start != c.start && k.end != c.end) {
            kept.push(c);
        }
    }
    kept
}

/// Forward values of the reranker for one span.
#[derive(Debug, Clone)]
pub struct RerankOutput<F> {
    pub eta: Vec<F>,
    pub span_vec: Array1<F>,
    pub hidden: Array1<F>,
    pub score: F,
}

/// Self-aligned pooling inside each span followed by a tanh projection.
pub fn rerank_score<F: Real>(
    p: &HeadParams<F>,
    h: ArrayView2<'_, F>,
    spans: &[(usize, usize)],
) -> Vec<RerankOutput<F>> {
    spans
        .iter()
        .map(|&(a, b)| {
            let rows = h.slice(ndarray::s![a..=b, ..]);
            let mut eta = rows.dot(&p.rerank_align).to_vec();
            softmax_inplace(&mut eta);
            let span_vec = Array1::from(eta.clone()).dot(&rows);
            let hidden = span_vec.dot(&p.rerank_proj).mapv(F::tanh);
            let score = hidden.dot(&p.rerank_out);
            RerankOutput {
                eta,
                span_vec,
                hidden,
                score,
            }
        })
        .collect()
}

pub fn rerank_backward<F: Real>(
    p: &HeadParams<F>,
    h: ArrayView2<'_, F>,
    spans: &[(usize, usize)],
    outs: &[RerankOutput<F>],
    d_scores: &[F],
    grads: &mut HeadParams<F>,
    mut dh: ArrayViewMut2<'_, F>,
) {
    for ((&(a, _), out), &g) in spans.iter().zip(outs).zip(d_scores) {
        if g == F::zero() {
            continue;
        }
        grads.rerank_out.scaled_add(g, &out.hidden);
        let mut dz = p.rerank_out.mapv(|w| w * g);
        dz.zip_mut_with(&out.hidden, |d, &t| *d *= F::one() - t * t);
        for (i, &x) in out.span_vec.iter().enumerate() {
            grads.rerank_proj.row_mut(i).scaled_add(x, &dz);
        }
        let dspan = p.rerank_proj.dot(&dz);
        let deta: Vec<F> = (0..out.eta.len()).map(|j| h.row(a + j).dot(&dspan)).collect();
        let dlogit = softmax_backward(&out.eta, &deta);
        for (j, (&e, &dl)) in out.eta.iter().zip(&dlogit).enumerate() {
            let mut row = dh.row_mut(a + j);
            row.scaled_add(e, &dspan);
            row.scaled_add(dl, &p.rerank_align);
            grads.rerank_align.scaled_add(dl, &h.row(a + j));
        }
    }
}

/// Reranker inputs and targets for one segment, padded to `M*` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct RerankBatch {
    pub spans: Vec<(usize, usize)>,
    pub hard: Vec<f64>,
    pub soft: Vec<f64>,
}

impl RerankBatch {
    /// Number of real (unpadded) candidates.
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

/// Exact-match and best token-F1 of a segment span against the golds.
pub fn span_labels<S: AsRef<str>>(segment: &Segment, span: (usize, usize), golds: &[S]) -> (f64, f64) {
    let toks = segment.span_tokens(span.0, span.1);
    golds.iter().fold((0.0f64, 0.0f64), |(h, s), g| {
        let g = tokenize(g.as_ref());
        let em = if exact_match(toks, &g) { 1.0 } else { 0.0 };
        (h.max(em), s.max(token_f1(toks, &g)))
    })
}

/// Hard and soft labels for post-NMS candidates. When no candidate is an
/// exact match and the segment holds a gold occurrence, the lowest-scored
/// slot (or an empty one) takes the first occurrence.
pub fn build_rerank_labels<S: AsRef<str>>(
    candidates: &[Span],
    segment: &Segment,
    golds: &[S],
    m_star: usize,
) -> RerankBatch {
    let mut spans: Vec<(usize, usize)> = candidates.iter().take(m_star).map(|c| (c.start, c.end)).collect();
    let mut labels: Vec<(f64, f64)> = spans.iter().map(|&s| span_labels(segment, s, golds)).collect();
    if labels.iter().all(|l| l.0 == 0.0) {
        if let Some(&gold) = segment.answer_spans.first() {
            let slot = if spans.is_empty() {
                spans.push(gold);
                labels.push((0.0, 0.0));
                0
            } else {
                candidates[..spans.len()]
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.score.total_cmp(&b.1.score).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .expect("non-empty")
            };
            spans[slot] = gold;
            labels[slot] = span_labels(segment, gold, golds);
        }
    }
    let mut hard = vec![0.0; m_star];
    let mut soft = vec![0.0; m_star];
    for (i, (h, s)) in labels.into_iter().enumerate() {
        hard[i] = h;
        soft[i] = s;
    }
    RerankBatch { spans, hard, soft }
}

/// A final answer candidate with its three component scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAnswer {
    /// Segment index within the instance.
    pub segment: usize,
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub reading: f64,
    pub rerank: f64,
    pub retrieve_prob: f64,
}
