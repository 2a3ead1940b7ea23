//! Answer prediction, evaluation metrics and the block-pass benchmark.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{exact_match, token_f1, tokenize, Instance};
use crate::encoder::{EncoderInput, ForwardMode, ModelParams};
use crate::heads::{
    propose_candidates, reader_scores, rerank_score, retrieve_score, select_segments, span_nms,
    CandidateAnswer, SelectMode,
};
use crate::preprocess::{prepare_instance, PreparedInstance, PreprocessConfig, TfIdf, Vocabulary};
use crate::train::TrainConfig;
use crate::{Error, Real, Result};

/// Weights of the retrieval probability, reading score and rerank score in
/// the final answer score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub retrieve: f64,
    pub read: f64,
    pub rerank: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            retrieve: 1.4,
            read: 1.0,
            rerank: 1.4,
        }
    }
}

pub fn combined_score(c: &CandidateAnswer, w: &ScoreWeights) -> f64 {
    w.retrieve * c.retrieve_prob + w.read * c.reading + w.rerank * c.rerank
}

/// How segments are chosen for full-depth reading.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentSelector {
    /// Top-N by the early-exit retriever.
    #[default]
    Retriever,
    /// Top-N by TF-IDF cosine between the question and each window.
    TfIdf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub retrieve_depth: usize,
    pub top_n: usize,
    pub proposals: usize,
    pub nms_keep: usize,
    pub max_answer_len: usize,
    pub weights: ScoreWeights,
    /// When false, the top `M*` proposals pass straight to the reranker.
    pub nms: bool,
    pub selector: SegmentSelector,
}

impl InferenceConfig {
    pub fn from_train(cfg: &TrainConfig, weights: ScoreWeights) -> Self {
        InferenceConfig {
            retrieve_depth: cfg.retrieve_depth,
            top_n: cfg.top_n,
            proposals: cfg.proposals,
            nms_keep: cfg.nms_keep,
            max_answer_len: cfg.max_answer_len,
            weights,
            nms: true,
            selector: SegmentSelector::Retriever,
        }
    }
}

/// Component ablations of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    NoReranker,
    NoRetriever,
    NoBoth,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoReranker,
        Ablation::NoRetriever,
        Ablation::NoBoth,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoReranker => "w/o reranker",
            Ablation::NoRetriever => "w/o retriever",
            Ablation::NoBoth => "w/o both",
        }
    }

    /// Without the retriever, segments are picked by TF-IDF and the
    /// retrieval probability leaves the score; without the reranker its
    /// score leaves the sum.
    pub fn apply(&self, base: &InferenceConfig) -> InferenceConfig {
        let mut cfg = base.clone();
        if matches!(self, Ablation::NoReranker | Ablation::NoBoth) {
            cfg.weights.rerank = 0.0;
        }
        if matches!(self, Ablation::NoRetriever | Ablation::NoBoth) {
            cfg.weights.retrieve = 0.0;
            cfg.selector = SegmentSelector::TfIdf;
        }
        cfg
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-reranker" => Ok(Ablation::NoReranker),
            "no-retriever" => Ok(Ablation::NoRetriever),
            "no-both" => Ok(Ablation::NoBoth),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (expected full, no-reranker, no-retriever or no-both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub answer: String,
    pub segment: usize,
    pub start: usize,
    pub end: usize,
    pub retrieve_prob: f64,
    pub reading: f64,
    pub rerank: f64,
    pub combined: f64,
}

/// Everything one prediction produced.
#[derive(Debug, Clone)]
pub struct PredictionOutput {
    pub prediction: Prediction,
    /// Every post-suppression candidate of every retained segment.
    pub candidates: Vec<CandidateAnswer>,
    /// Segment indices in retriever order, best first.
    pub retrieval_ranking: Vec<usize>,
    /// Segments passed on to full-depth reading.
    pub selected: Vec<usize>,
    pub block_passes: usize,
}

/// The best candidate under `weights`; ties go to the lower
/// `(segment, start, end)`.
pub fn choose_answer<'a>(candidates: &'a [CandidateAnswer], weights: &ScoreWeights) -> Option<&'a CandidateAnswer> {
    let mut best: Option<(&CandidateAnswer, f64)> = None;
    for c in candidates {
        let s = combined_score(c, weights);
        best = match best {
            Some((b, bs)) if bs > s || (bs == s && (b.segment, b.start, b.end) <= (c.segment, c.start, c.end)) => {
                Some((b, bs))
            }
            _ => Some((c, s)),
        };
    }
    best.map(|(c, _)| c)
}

fn tfidf_selection(inst: &PreparedInstance, n: usize) -> Vec<usize> {
    let windows: Vec<&[String]> = inst.segments.iter().map(|s| s.context_tokens.as_slice()).collect();
    TfIdf::fit(&windows).nearest(&inst.question_tokens, n)
}

/// Runs retrieval at depth `J`, resumes the selected segments to full depth,
/// proposes, suppresses and reranks spans, and picks the best answer.
pub fn predict<F: Real>(
    params: &ModelParams<F>,
    inst: &PreparedInstance,
    cfg: &InferenceConfig,
) -> Result<PredictionOutput> {
    if inst.segments.is_empty() {
        return Err(Error::InvalidInput(format!("instance `{}` has no segments", inst.question.id)));
    }
    let mut state = params.start(EncoderInput::from_segments(&inst.segments), ForwardMode::INFERENCE)?;
    params.encode_until(&mut state, cfg.retrieve_depth)?;
    let probs = inst
        .segments
        .iter()
        .enumerate()
        .map(|(b, s)| Ok(retrieve_score(&params.heads, state.segment(b), s.valid_len())?.probability().as_f64()))
        .collect::<Result<Vec<f64>>>()?;
    let no_gold = vec![false; probs.len()];
    let retrieval_ranking = select_segments(&probs, &no_gold, probs.len(), SelectMode::Infer);
    let selected = match cfg.selector {
        SegmentSelector::Retriever => retrieval_ranking[..cfg.top_n.min(probs.len())].to_vec(),
        SegmentSelector::TfIdf => tfidf_selection(inst, cfg.top_n),
    };

    let mut full = state.select(&selected);
    params.resume_encode(&mut full)?;
    let mut candidates = Vec::new();
    for (b, &si) in selected.iter().enumerate() {
        let seg = &inst.segments[si];
        let h = full.segment(b);
        let (s, e) = reader_scores(&params.heads, h, seg.context_span);
        let props = propose_candidates(&s, &e, seg.context_span, cfg.proposals, cfg.max_answer_len);
        let kept = if cfg.nms {
            span_nms(&props, cfg.nms_keep)
        } else {
            props.into_iter().take(cfg.nms_keep).collect()
        };
        let spans: Vec<(usize, usize)> = kept.iter().map(|c| (c.start, c.end)).collect();
        let reranked = rerank_score(&params.heads, h, &spans);
        for (c, r) in kept.iter().zip(reranked) {
            candidates.push(CandidateAnswer {
                segment: si,
                start: c.start,
                end: c.end,
                text: inst.document.span_text(seg.doc_offset(c.start), seg.doc_offset(c.end)),
                reading: c.score,
                rerank: r.score.as_f64(),
                retrieve_prob: probs[si],
            });
        }
    }
    let best = choose_answer(&candidates, &cfg.weights).ok_or_else(|| {
        Error::InvalidInput(format!(
            "instance `{}`: no candidate answer in {} retained segments",
            inst.question.id,
            selected.len()
        ))
    })?;
    let prediction = Prediction {
        id: inst.question.id.clone(),
        answer: best.text.clone(),
        segment: best.segment,
        start: best.start,
        end: best.end,
        retrieve_prob: best.retrieve_prob,
        reading: best.reading,
        rerank: best.rerank,
        combined: combined_score(best, &cfg.weights),
    };
    Ok(PredictionOutput {
        prediction,
        candidates,
        retrieval_ranking,
        selected,
        block_passes: state.block_passes() + full.block_passes(),
    })
}

/// Preprocesses a raw instance and predicts its answer.
pub fn predict_instance<F: Real>(
    params: &ModelParams<F>,
    inst: &Instance,
    pre: &PreprocessConfig,
    vocab: &Vocabulary,
    cfg: &InferenceConfig,
) -> Result<PredictionOutput> {
    predict(params, &prepare_instance(inst, pre, vocab)?, cfg)
}

/// Exact match and best token-F1 of a prediction against the gold answers.
pub fn metric_em_f1<S: AsRef<str>>(prediction: &str, golds: &[S]) -> (f64, f64) {
    let pred = tokenize(prediction);
    golds.iter().fold((0.0f64, 0.0f64), |(em, f1), g| {
        let g = tokenize(g.as_ref());
        (em.max(if exact_match(&pred, &g) { 1.0 } else { 0.0 }), f1.max(token_f1(&pred, &g)))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopN {
    pub n: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub map: f64,
    pub top_n: Vec<TopN>,
    /// Instances with at least one relevant segment.
    pub answerable: usize,
}

/// Mean average precision over ranked relevance lists and top-N hit rates.
/// Lists with no relevant entry are left out of MAP and count as misses.
pub fn metric_map_topn(ranked: &[Vec<bool>], ns: &[usize]) -> RetrievalMetrics {
    let mut ap_sum = 0.0;
    let mut answerable = 0;
    let mut hits = vec![0usize; ns.len()];
    for rel in ranked {
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        for (rank, &r) in rel.iter().enumerate() {
            if r {
                found += 1;
                precision_sum += found as f64 / (rank + 1) as f64;
            }
        }
        if found > 0 {
            answerable += 1;
            ap_sum += precision_sum / found as f64;
        }
        for (h, &n) in hits.iter_mut().zip(ns) {
            if rel.iter().take(n).any(|&r| r) {
                *h += 1;
            }
        }
    }
    let total = ranked.len().max(1) as f64;
    RetrievalMetrics {
        map: if answerable == 0 { 0.0 } else { ap_sum / answerable as f64 },
        top_n: ns
            .iter()
            .zip(hits)
            .map(|(&n, h)| TopN { n, rate: h as f64 / total })
            .collect(),
        answerable,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ablation: Ablation,
    pub instances: usize,
    pub em: f64,
    pub f1: f64,
    pub map: f64,
    pub top_n: Vec<TopN>,
    pub answerable: usize,
    pub block_passes: usize,
}

impl EvalReport {
    pub fn top(&self, n: usize) -> Option<f64> {
        self.top_n.iter().find(|t| t.n == n).map(|t| t.rate)
    }
}

/// Aligned plain-text table, one row per report.
pub fn format_reports(reports: &[EvalReport]) -> String {
    let ns: Vec<usize> = reports.first().map(|r| r.top_n.iter().map(|t| t.n).collect()).unwrap_or_default();
    let mut out = format!("{:<14} {:>9} {:>7} {:>7} {:>7}", "model", "instances", "EM", "F1", "MAP");
    for n in &ns {
        let _ = write!(out, " {:>7}", format!("top-{n}"));
    }
    let _ = writeln!(out, " {:>12}", "block_passes");
    for r in reports {
        let _ = write!(
            out,
            "{:<14} {:>9} {:>7.4} {:>7.4} {:>7.4}",
            r.ablation.label(),
            r.instances,
            r.em,
            r.f1,
            r.map
        );
        for t in &r.top_n {
            let _ = write!(out, " {:>7.4}", t.rate);
        }
        let _ = writeln!(out, " {:>12}", r.block_passes);
    }
    out
}

/// Predictions and candidates of one evaluation run.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<Prediction>,
    /// `(instance id, candidate)` pairs in prediction order.
    pub candidates: Vec<(String, CandidateAnswer)>,
}

pub const TOP_N_REPORTED: [usize; 3] = [1, 2, 3];

/// Predicts every instance under `ablation` and aggregates the metrics.
/// Retrieval metrics always rank segments by the retriever.
pub fn evaluate<F: Real>(
    params: &ModelParams<F>,
    data: &[PreparedInstance],
    base: &InferenceConfig,
    ablation: Ablation,
) -> Result<Evaluation> {
    let cfg = ablation.apply(base);
    let mut predictions = Vec::with_capacity(data.len());
    let mut candidates = Vec::new();
    let mut ranked = Vec::with_capacity(data.len());
    let (mut em, mut f1, mut passes) = (0.0, 0.0, 0);
    for inst in data {
        let out = predict(params, inst, &cfg)?;
        let (e, f) = metric_em_f1(&out.prediction.answer, &inst.question.gold_answers);
        em += e;
        f1 += f;
        passes += out.block_passes;
        ranked.push(out.retrieval_ranking.iter().map(|&s| inst.segments[s].is_positive).collect());
        candidates.extend(out.candidates.into_iter().map(|c| (inst.question.id.clone(), c)));
        predictions.push(out.prediction);
    }
    let retrieval = metric_map_topn(&ranked, &TOP_N_REPORTED);
    let n = data.len().max(1) as f64;
    Ok(Evaluation {
        report: EvalReport {
            ablation,
            instances: data.len(),
            em: em / n,
            f1: f1 / n,
            map: retrieval.map,
            top_n: retrieval.top_n,
            answerable: retrieval.answerable,
            block_passes: passes,
        },
        predictions,
        candidates,
    })
}

/// One line per prediction: id, answer, the three scores and the combined score.
pub fn write_predictions(predictions: &[Prediction], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "id\tanswer\tretrieve\treading\trerank\tcombined")?;
    for p in predictions {
        writeln!(
            w,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            p.id, p.answer, p.retrieve_prob, p.reading, p.rerank, p.combined
        )?;
    }
    Ok(())
}

/// One line per candidate: instance id, segment, start, end, text and the three scores.
pub fn write_candidates(candidates: &[(String, CandidateAnswer)], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "id\tsegment\tstart\tend\ttext\tretrieve\treading\trerank")?;
    for (id, c) in candidates {
        writeln!(
            w,
            "{id}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            c.segment, c.start, c.end, c.text, c.retrieve_prob, c.reading, c.rerank
        )?;
    }
    Ok(())
}

/// Block applications needed by the shared-encoder model and by three
/// separate models for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockPassCount {
    pub segments: usize,
    pub top_n: usize,
    pub layers: usize,
    pub depth: usize,
    pub unified: usize,
    pub pipeline: usize,
}

impl BlockPassCount {
    pub fn ratio(&self) -> f64 {
        self.pipeline as f64 / self.unified as f64
    }
}

/// `unified = nJ + N(I - J)`: the retriever shares the first `J` blocks and
/// reader and reranker share the final states. `pipeline = nJ + 2NI`: the
/// reader and reranker each re-encode the retained segments.
pub fn block_pass_benchmark(n: usize, top_n: usize, layers: usize, depth: usize) -> Result<BlockPassCount> {
    if top_n > n || depth > layers {
        return Err(Error::InvalidInput(format!(
            "need N <= n and J <= I, got n={n} N={top_n} I={layers} J={depth}"
        )));
    }
    Ok(BlockPassCount {
        segments: n,
        top_n,
        layers,
        depth,
        unified: n * depth + top_n * (layers - depth),
        pipeline: n * depth + 2 * top_n * layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};
    use crate::encoder::ModelConfig;
    use crate::preprocess::prepare_all;
    use proptest::prelude::*;

    fn cand(segment: usize, start: usize, retrieve: f64, reading: f64, rerank: f64) -> CandidateAnswer {
        CandidateAnswer {
            segment,
            start,
            end: start,
            text: format!("c{segment}-{start}"),
            reading,
            rerank,
            retrieve_prob: retrieve,
        }
    }

    #[test]
    fn case_study_scores() {
        let w = ScoreWeights::default();
        let wi = cand(0, 1, 0.517, 11.226, 2.093);
        let ywca = cand(0, 2, 0.231, 11.263, 2.299);
        assert!((combined_score(&wi, &w) - 14.880).abs() < 5e-4);
        assert!((combined_score(&ywca, &w) - 14.805).abs() < 5e-4);
        let both = [ywca.clone(), wi.clone()];
        assert_eq!(choose_answer(&both, &w), Some(&wi));

        let macau = cand(1, 1, 0.195, 11.067, 2.502);
        let kowloon = cand(0, 3, 0.346, 11.175, 1.795);
        assert!((combined_score(&macau, &w) - 14.843).abs() < 5e-4);
        assert!((combined_score(&kowloon, &w) - 14.172).abs() < 5e-4);
        let pool = [kowloon.clone(), macau.clone()];
        assert_eq!(choose_answer(&pool, &w), Some(&macau));
        let reader_only = ScoreWeights { retrieve: 0.0, read: 1.0, rerank: 0.0 };
        assert_eq!(choose_answer(&pool, &reader_only), Some(&kowloon));
        assert_eq!(choose_answer(&[], &w), None);
    }

    #[test]
    fn ties_go_to_lower_position() {
        let w = ScoreWeights::default();
        let a = cand(1, 0, 0.5, 1.0, 0.0);
        let b = cand(0, 4, 0.5, 1.0, 0.0);
        assert_eq!(choose_answer(&[a.clone(), b.clone()], &w), Some(&b));
        assert_eq!(choose_answer(&[b.clone(), a], &w), Some(&b));
    }

    #[test]
    fn em_f1_examples() {
        assert_eq!(metric_em_f1("Baby Buggy", &["baby buggy"]), (1.0, 1.0));
        let (em, f1) = metric_em_f1("collapsible baby buggy", &["baby buggy"]);
        assert_eq!(em, 0.0);
        assert!((f1 - 0.8).abs() < 1e-15);
        assert_eq!(metric_em_f1("red", &["blue", "green"]), (0.0, 0.0));
        assert_eq!(metric_em_f1("x y", &["x", "x y"]), (1.0, 1.0));
    }

    #[test]
    fn map_topn_examples() {
        let m = metric_map_topn(&[vec![true, false, true]], &[1, 2, 3]);
        assert!((m.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((m.map - 0.8333).abs() < 1e-4);
        assert_eq!(metric_map_topn(&[vec![true; 4]], &[1]).map, 1.0);
        let m = metric_map_topn(&[vec![false, false, true]], &[2, 3]);
        assert_eq!(m.top_n, vec![TopN { n: 2, rate: 0.0 }, TopN { n: 3, rate: 1.0 }]);
        let m = metric_map_topn(&[vec![false, false], vec![true]], &[1]);
        assert_eq!((m.map, m.answerable, m.top_n[0].rate), (1.0, 1, 0.5));
    }

    #[test]
    fn benchmark_examples() {
        let b = block_pass_benchmark(17, 8, 12, 3).unwrap();
        assert_eq!((b.unified, b.pipeline), (123, 243));
        assert!((b.ratio() - 243.0 / 123.0).abs() < 1e-15);
        let b = block_pass_benchmark(5, 5, 4, 4).unwrap();
        assert_eq!(b.ratio(), 3.0);
        let b = block_pass_benchmark(5, 5, 4, 0).unwrap();
        assert_eq!(b.ratio(), 2.0);
        assert!(block_pass_benchmark(3, 4, 4, 2).is_err());
        assert!(block_pass_benchmark(4, 4, 4, 5).is_err());
    }

    fn fixture() -> (Vec<PreparedInstance>, ModelParams<f64>) {
        let instances = generate_synthetic(&SyntheticSpec {
            seed: 5,
            num_instances: 6,
            dev_instances: 0,
            docs_per_instance: 2,
            paragraphs_per_doc: 3,
            paragraph_len_range: (8, 14),
            vocab_size: 96,
            distractor_rate: 0.5,
        })
        .unwrap();
        let vocab = Vocabulary::build(&instances);
        let pre = PreprocessConfig { max_seq_len: 32, stride: 10, ..PreprocessConfig::default() };
        let data = prepare_all(&instances, &pre, &vocab).unwrap();
        let model = ModelConfig { vocab_size: vocab.len(), hidden: 8, layers: 3, heads: 2, max_seq_len: 32 };
        (data, ModelParams::init(model, 3, 0.5).unwrap())
    }

    fn base_config() -> InferenceConfig {
        InferenceConfig::from_train(&TrainConfig { retrieve_depth: 1, ..TrainConfig::default() }, ScoreWeights::default())
    }

    #[test]
    fn predict_counts_block_passes_and_respects_nms() {
        let (data, p) = fixture();
        let cfg = base_config();
        for inst in &data {
            let out = predict(&p, inst, &cfg).unwrap();
            let n = inst.segments.len();
            let kept = cfg.top_n.min(n);
            let want = block_pass_benchmark(n, kept, 3, 1).unwrap().unified;
            assert_eq!(out.block_passes, want);
            assert_eq!(out.selected.len(), kept);
            for c in &out.candidates {
                let same_seg: Vec<_> = out.candidates.iter().filter(|d| d.segment == c.segment).collect();
                let clashes = same_seg.iter().filter(|d| d.start == c.start || d.end == c.end).count();
                assert_eq!(clashes, 1);
                assert!(c.end - c.start < cfg.max_answer_len);
            }
            let chosen = choose_answer(&out.candidates, &cfg.weights).unwrap();
            assert_eq!(chosen.text, out.prediction.answer);
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn reader_only_without_nms_is_raw_reader_argmax() {
        let (data, p) = fixture();
        let cfg = InferenceConfig {
            weights: ScoreWeights { retrieve: 0.0, read: 1.0, rerank: 0.0 },
            nms: false,
            nms_keep: 10,
            proposals: 10,
            ..base_config()
        };
        for inst in &data {
            let out = predict(&p, inst, &cfg).unwrap();
            let mut best = (f64::NEG_INFINITY, 0, 0, 0);
            for &si in &out.selected {
                let seg = &inst.segments[si];
                let mut st = p.start(EncoderInput::from_segments([seg]), ForwardMode::INFERENCE).unwrap();
                p.resume_encode(&mut st).unwrap();
                let (s, e) = reader_scores(&p.heads, st.segment(0), seg.context_span);
                for a in seg.context_span.0..=seg.context_span.1 {
                    for b in a..=seg.context_span.1.min(a + cfg.max_answer_len - 1) {
                        let v = s[a] + e[b];
                        if v > best.0 || (v == best.0 && (si, a, b) < (best.1, best.2, best.3)) {
                            best = (v, si, a, b);
                        }
                    }
                }
            }
            let got = &out.prediction;
            assert_eq!((got.segment, got.start, got.end), (best.1, best.2, best.3));
        }
    }

    #[test]
    fn ablations_change_selection_and_weights() {
        let (data, p) = fixture();
        let base = base_config();
        let cfg = Ablation::NoBoth.apply(&base);
        assert_eq!((cfg.weights.retrieve, cfg.weights.read, cfg.weights.rerank), (0.0, 1.0, 0.0));
        assert_eq!(cfg.selector, SegmentSelector::TfIdf);
        assert_eq!(Ablation::NoReranker.apply(&base).selector, SegmentSelector::Retriever);
        for a in Ablation::ALL {
            let ev = evaluate(&p, &data, &base, a).unwrap();
            let r = &ev.report;
            for v in [r.em, r.f1, r.map, r.top(1).unwrap(), r.top(3).unwrap()] {
                assert!((0.0..=1.0).contains(&v));
            }
            assert_eq!(ev.predictions.len(), data.len());
        }
        let reports: Vec<EvalReport> =
            Ablation::ALL.iter().map(|&a| evaluate(&p, &data, &base, a).unwrap().report).collect();
        let table = format_reports(&reports);
        assert_eq!(table.lines().count(), 5);
        assert!(table.contains("w/o both"));
        let json = serde_json::to_string(&reports).unwrap();
        assert!(json.contains("\"no-both\""));
    }

    #[test]
    fn file_formats() {
        let p = Prediction {
            id: "q1".into(),
            answer: "Macau".into(),
            segment: 1,
            start: 4,
            end: 4,
            retrieve_prob: 0.195,
            reading: 11.067,
            rerank: 2.502,
            combined: 14.8428,
        };
        let mut buf = Vec::new();
        write_predictions(&[p], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "q1\tMacau\t0.195000\t11.067000\t2.502000\t14.842800");
        let mut buf = Vec::new();
        write_candidates(&[("q1".into(), cand(2, 5, 0.5, 1.0, -1.0))], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "q1\t2\t5\t5\tc2-5\t0.500000\t1.000000\t-1.000000");
    }

    fn naive_ap(rel: &[bool]) -> Option<f64> {
        let relevant: Vec<usize> = (0..rel.len()).filter(|&i| rel[i]).collect();
        if relevant.is_empty() {
            return None;
        }
        let precisions: Vec<f64> = relevant
            .iter()
            .map(|&k| rel[..=k].iter().filter(|&&r| r).count() as f64 / (k + 1) as f64)
            .collect();
        Some(precisions.iter().sum::<f64>() / precisions.len() as f64)
    }

    proptest! {
        #[test]
        fn scaling_weights_keeps_the_answer(
            cands in prop::collection::vec((0usize..3, 0usize..5, 0.0f64..1.0, -5.0f64..15.0, -3.0f64..3.0), 1..20),
            w in (0.0f64..2.0, 0.0f64..2.0, 0.0f64..2.0),
            k in -4i32..5,
        ) {
            let cands: Vec<CandidateAnswer> = cands.into_iter().map(|(s, a, r, d, e)| cand(s, a, r, d, e)).collect();
            let w = ScoreWeights { retrieve: w.0, read: w.1, rerank: w.2 };
            let c = 2f64.powi(k);
            let scaled = ScoreWeights { retrieve: c * w.retrieve, read: c * w.read, rerank: c * w.rerank };
            prop_assert_eq!(choose_answer(&cands, &w), choose_answer(&cands, &scaled));
        }

        #[test]
        fn em_never_exceeds_f1(
            pred in prop::collection::vec(0u8..5, 0..6),
            golds in prop::collection::vec(prop::collection::vec(0u8..5, 1..6), 1..3),
        ) {
            let words = ["a", "b", "the", "c.", "D"];
            let join = |v: &[u8]| v.iter().map(|&i| words[i as usize]).collect::<Vec<_>>().join(" ");
            let golds: Vec<String> = golds.iter().map(|g| join(g)).collect();
            let (em, f1) = metric_em_f1(&join(&pred), &golds);
            prop_assert!(em <= f1);
            prop_assert!((0.0..=1.0).contains(&f1));
        }

        #[test]
        fn map_and_topn_match_naive(lists in prop::collection::vec(prop::collection::vec(any::<bool>(), 0..10), 1..20)) {
            let m = metric_map_topn(&lists, &[1, 2, 3]);
            let aps: Vec<f64> = lists.iter().filter_map(|l| naive_ap(l)).collect();
            let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
            prop_assert!((m.map - map).abs() < 1e-12);
            for t in &m.top_n {
                let hits = lists.iter().filter(|l| l.iter().take(t.n).any(|&r| r)).count();
                prop_assert_eq!(t.rate, hits as f64 / lists.len() as f64);
            }
        }

        #[test]
        fn unified_beats_pipeline_when_depth_positive(n in 1usize..40, frac in 0.0f64..1.0, i in 1usize..24, jf in 0.0f64..1.0) {
            let top = ((n as f64 * frac) as usize).max(1);
            let j = ((i as f64 * jf) as usize).max(1);
            let b = block_pass_benchmark(n, top, i, j).unwrap();
            prop_assert!(b.unified < b.pipeline);
        }
    }
}
