//! Joint training of the retriever, reader and reranker.
//!
//! Each epoch scores every segment at the early-exit depth, keeps the top
//! `N` per instance (with gold substitution), and then walks the full
//! segment list and the retained list in lockstep so that both finish in
//! the same number of steps. A step sums the three losses and applies one
//! Adam update.

mod loss;
mod optim;

use std::ops::Range;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_synthetic, SyntheticSpec};
use crate::encoder::{
    gradient_check, EncoderInput, ForwardMode, GradCheckReport, ModelConfig, ModelParams,
};
use crate::heads::{
    build_rerank_labels, propose_candidates, reader_backward, reader_scores, rerank_backward,
    rerank_score, retrieve_backward, retrieve_score, select_segments, span_nms, RerankBatch,
    SelectMode,
};
use crate::preprocess::{prepare_all, PreparedInstance, PreprocessConfig, Segment, Vocabulary};
use crate::{Error, Real, Result};

pub use loss::{loss_read, loss_rerank, loss_retrieve, ReadExample, RerankExample, RerankNorm};
pub use optim::{adam_step, clip_global_norm, scheduled_rate, OptimizerState, BETA1, BETA2, EPSILON};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Early-exit depth `J` of the retriever.
    pub retrieve_depth: usize,
    /// Segments kept per instance (`N`).
    pub top_n: usize,
    /// Spans proposed per segment (`M`).
    pub proposals: usize,
    /// Spans kept after suppression (`M*`).
    pub nms_keep: usize,
    pub max_answer_len: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    /// Retained segments per step.
    pub batch_size: usize,
    pub dropout: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub rerank_norm: RerankNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            retrieve_depth: 2,
            top_n: 2,
            proposals: 10,
            nms_keep: 5,
            max_answer_len: 8,
            epochs: 10,
            learning_rate: 1e-3,
            warmup_fraction: 0.1,
            batch_size: 8,
            dropout: 0.1,
            clip_norm: 1.0,
            seed: 7,
            rerank_norm: RerankNorm::Softmax,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.retrieve_depth == 0 || self.retrieve_depth >= model.layers {
            return fail(format!(
                "J = {} must satisfy 1 <= J < I = {}",
                self.retrieve_depth, model.layers
            ));
        }
        for (name, v) in [
            ("N", self.top_n),
            ("M", self.proposals),
            ("M*", self.nms_keep),
            ("max answer length", self.max_answer_len),
            ("batch size", self.batch_size),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return fail(format!("warmup fraction {} outside [0, 1]", self.warmup_fraction));
        }
        if !(self.learning_rate > 0.0 && self.clip_norm > 0.0) {
            return fail("learning rate and clip norm must be positive".into());
        }
        Ok(())
    }
}

/// Per-step values of the three losses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub retrieve: f64,
    pub read: f64,
    pub rerank: f64,
}

impl StepLosses {
    pub fn total(&self) -> f64 {
        self.retrieve + self.read + self.rerank
    }

    fn weighted(&self, w: [f64; 3]) -> f64 {
        w[0] * self.retrieve + w[1] * self.read + w[2] * self.rerank
    }
}

/// A retained segment together with its instance's gold answers.
#[derive(Debug, Clone, Copy)]
pub struct ReadItem<'a> {
    pub segment: &'a Segment,
    pub golds: &'a [String],
}

/// Computes the three losses for one step: `L_I` on `x` at depth `J`, and
/// `L_II`, `L_III` on `x_tilde` from a single full-depth encoding.
///
/// With `grads`, the gradient of `w · (L_I, L_II, L_III)` is accumulated
/// into it. Reranker candidates come from the current reader scores unless
/// `frozen` supplies them. Returns the candidates that were used.
#[allow(clippy::too_many_arguments)]
pub fn step_losses<F: Real>(
    params: &ModelParams<F>,
    x: &[&Segment],
    x_tilde: &[ReadItem<'_>],
    cfg: &TrainConfig,
    frozen: Option<&[RerankBatch]>,
    dropout: (f64, u64),
    weights: [f64; 3],
    mut grads: Option<&mut ModelParams<F>>,
) -> Result<(StepLosses, Vec<RerankBatch>)> {
    let record = grads.is_some();
    let mode = |seed| ForwardMode {
        record,
        dropout: dropout.0,
        seed,
    };
    let mut losses = StepLosses::default();

    if !x.is_empty() {
        let mut st = params.start(EncoderInput::from_segments(x.iter().copied()), mode(dropout.1))?;
        params.encode_until(&mut st, cfg.retrieve_depth)?;
        let outs = (0..x.len())
            .map(|b| retrieve_score(&params.heads, st.segment(b), x[b].valid_len()))
            .collect::<Result<Vec<_>>>()?;
        let scores: Vec<[F; 2]> = outs.iter().map(|o| o.scores).collect();
        let labels: Vec<[f64; 2]> = x.iter().map(|s| s.retrieval_label()).collect();
        let (l, d) = loss_retrieve(&scores, &labels);
        losses.retrieve = l.as_f64();
        if let Some(g) = grads.as_deref_mut() {
            let w = F::of(weights[0]);
            let len = st.seq_len();
            let mut dh = Array2::zeros(st.top().raw_dim());
            for (b, out) in outs.iter().enumerate() {
                retrieve_backward(
                    &params.heads,
                    st.segment(b),
                    out,
                    [d[b][0] * w, d[b][1] * w],
                    &mut g.heads,
                    dh.slice_mut(s![b * len..(b + 1) * len, ..]),
                );
            }
            params.backward(&mut st, dh, g)?;
        }
    }

    let mut batches = Vec::with_capacity(x_tilde.len());
    if !x_tilde.is_empty() {
        let input = EncoderInput::from_segments(x_tilde.iter().map(|i| i.segment));
        let mut st = params.start(input, mode(dropout.1 ^ 0x9e37_79b9_7f4a_7c15))?;
        params.resume_encode(&mut st)?;
        let reads: Vec<(Vec<F>, Vec<F>)> = x_tilde
            .iter()
            .enumerate()
            .map(|(b, it)| reader_scores(&params.heads, st.segment(b), it.segment.context_span))
            .collect();
        let examples: Vec<ReadExample<'_, F>> = reads
            .iter()
            .zip(x_tilde)
            .map(|((s, e), it)| ReadExample {
                start: s,
                end: e,
                start_labels: &it.segment.start_labels,
                end_labels: &it.segment.end_labels,
            })
            .collect();
        let (read_loss, ds, de) = loss_read(&examples);
        losses.read = read_loss.as_f64();

        for (b, it) in x_tilde.iter().enumerate() {
            let batch = match frozen {
                Some(f) => f[b].clone(),
                None => {
                    let (s, e) = &reads[b];
                    let props = propose_candidates(
                        s,
                        e,
                        it.segment.context_span,
                        cfg.proposals,
                        cfg.max_answer_len,
                    );
                    build_rerank_labels(&span_nms(&props, cfg.nms_keep), it.segment, it.golds, cfg.nms_keep)
                }
            };
            batches.push(batch);
        }
        let outs: Vec<_> = batches
            .iter()
            .enumerate()
            .map(|(b, rb)| rerank_score(&params.heads, st.segment(b), &rb.spans))
            .collect();
        let scores: Vec<Vec<F>> = outs.iter().map(|o| o.iter().map(|r| r.score).collect()).collect();
        let examples: Vec<RerankExample<'_, F>> = scores
            .iter()
            .zip(&batches)
            .map(|(s, rb)| RerankExample {
                scores: s,
                hard: &rb.hard,
                soft: &rb.soft,
            })
            .collect();
        let (rerank_loss, dr) = loss_rerank(&examples, cfg.rerank_norm);
        losses.rerank = rerank_loss.as_f64();

        if let Some(g) = grads {
            let (w1, w2) = (F::of(weights[1]), F::of(weights[2]));
            let len = st.seq_len();
            let mut dh = Array2::zeros(st.top().raw_dim());
            for b in 0..x_tilde.len() {
                let rows = s![b * len..(b + 1) * len, ..];
                let scale = |v: &[F], w: F| v.iter().map(|&g| g * w).collect::<Vec<F>>();
                reader_backward(
                    &params.heads,
                    st.segment(b),
                    &scale(&ds[b], w1),
                    &scale(&de[b], w1),
                    &mut g.heads,
                    dh.slice_mut(rows),
                );
                rerank_backward(
                    &params.heads,
                    st.segment(b),
                    &batches[b].spans,
                    &outs[b],
                    &scale(&dr[b], w2),
                    &mut g.heads,
                    dh.slice_mut(rows),
                );
            }
            params.backward(&mut st, dh, g)?;
        }
    }
    Ok((losses, batches))
}

/// Step count and full-set batch size so that both sets finish together.
pub fn lockstep_sizes(x_len: usize, x_tilde_len: usize, batch_size: usize) -> Result<(usize, usize)> {
    if x_tilde_len == 0 {
        return Err(Error::Config("no retained segments to train on".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let steps = x_tilde_len.div_ceil(batch_size);
    Ok((steps, x_len.div_ceil(steps)))
}

/// Index ranges into the (shuffled) full and retained sets for every step.
/// Trailing full-set ranges may be empty.
pub fn epoch_batches(
    x_len: usize,
    x_tilde_len: usize,
    batch_size: usize,
) -> Result<Vec<(Range<usize>, Range<usize>)>> {
    let (steps, batch_x) = lockstep_sizes(x_len, x_tilde_len, batch_size)?;
    Ok((0..steps)
        .map(|t| {
            let x = (t * batch_x).min(x_len)..((t + 1) * batch_x).min(x_len);
            let xt = t * batch_size..((t + 1) * batch_size).min(x_tilde_len);
            (x, xt)
        })
        .collect())
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub losses: StepLosses,
    pub learning_rate: f64,
}

/// Callbacks fired during [`train`].
pub trait TrainObserver<F> {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    /// Called after epoch `epoch` (one-based) with the updated parameters.
    fn on_epoch(&mut self, _epoch: usize, _params: &ModelParams<F>) -> Result<()> {
        Ok(())
    }
}

impl<F> TrainObserver<F> for () {}

/// Positive-class probabilities of `segments` after `depth` blocks.
pub fn retrieval_probabilities<F: Real>(
    params: &ModelParams<F>,
    segments: &[&Segment],
    depth: usize,
) -> Result<Vec<f64>> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(segments.len());
    for chunk in segments.chunks(CHUNK) {
        let mut st = params.start(EncoderInput::from_segments(chunk.iter().copied()), ForwardMode::INFERENCE)?;
        params.encode_until(&mut st, depth)?;
        for (b, seg) in chunk.iter().enumerate() {
            out.push(retrieve_score(&params.heads, st.segment(b), seg.valid_len())?.probability().as_f64());
        }
    }
    Ok(out)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0xd1b5_4a32_d192_ed03)
}

/// Trains `params` in place for `cfg.epochs` epochs and returns the step log.
pub fn train<F: Real>(
    params: &mut ModelParams<F>,
    data: &[PreparedInstance],
    cfg: &TrainConfig,
    observer: &mut impl TrainObserver<F>,
) -> Result<Vec<StepRecord>> {
    cfg.validate(&params.config)?;
    let x_all: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(i, inst)| (0..inst.segments.len()).map(move |s| (i, s)))
        .collect();
    let x_tilde_len: usize = data.iter().map(|d| d.segments.len().min(cfg.top_n)).sum();
    let (steps, _) = lockstep_sizes(x_all.len(), x_tilde_len, cfg.batch_size)?;
    let total_steps = (steps * cfg.epochs) as u64;
    let warmup = (cfg.warmup_fraction * total_steps as f64).ceil() as u64;
    let mut opt = OptimizerState::new(params);
    let mut grads = params.zeros_like();
    let mut log = Vec::with_capacity(total_steps as usize);
    let mut global_step = 0u64;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch));
        let segs: Vec<&Segment> = x_all.iter().map(|&(i, s)| &data[i].segments[s]).collect();
        let probs = retrieval_probabilities(params, &segs, cfg.retrieve_depth)?;
        let mut x_tilde: Vec<(usize, usize)> = Vec::with_capacity(x_tilde_len);
        let mut offset = 0;
        for (i, inst) in data.iter().enumerate() {
            let n = inst.segments.len();
            let gold: Vec<bool> = inst.segments.iter().map(|s| s.is_positive).collect();
            let keep = select_segments(&probs[offset..offset + n], &gold, cfg.top_n, SelectMode::Train);
            x_tilde.extend(keep.into_iter().map(|s| (i, s)));
            offset += n;
        }
        let mut x = x_all.clone();
        x.shuffle(&mut rng);
        x_tilde.shuffle(&mut rng);

        let mut epoch_sum = StepLosses::default();
        let plan = epoch_batches(x.len(), x_tilde.len(), cfg.batch_size)?;
        for (step, (xr, xtr)) in plan.into_iter().enumerate() {
            let xb: Vec<&Segment> = x[xr].iter().map(|&(i, s)| &data[i].segments[s]).collect();
            let xtb: Vec<ReadItem<'_>> = x_tilde[xtr]
                .iter()
                .map(|&(i, s)| ReadItem {
                    segment: &data[i].segments[s],
                    golds: &data[i].question.gold_answers,
                })
                .collect();
            grads.fill_zero();
            let (losses, _) = step_losses(
                params,
                &xb,
                &xtb,
                cfg,
                None,
                (cfg.dropout, rng.random()),
                [1.0; 3],
                Some(&mut grads),
            )?;
            if !losses.total().is_finite() || !grads.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!(
                        "L_I = {}, L_II = {}, L_III = {}",
                        losses.retrieve, losses.read, losses.rerank
                    ),
                });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            let lr = scheduled_rate(cfg.learning_rate, global_step, warmup);
            adam_step(params, &grads, &mut opt, lr)?;
            global_step += 1;
            let record = StepRecord {
                epoch,
                step,
                losses,
                learning_rate: lr,
            };
            epoch_sum.retrieve += losses.retrieve;
            epoch_sum.read += losses.read;
            epoch_sum.rerank += losses.rerank;
            observer.on_step(&record)?;
            log.push(record);
        }
        let n = steps as f64;
        log::info!(
            "epoch {epoch}: L_I {:.4}  L_II {:.4}  L_III {:.4}",
            epoch_sum.retrieve / n,
            epoch_sum.read / n,
            epoch_sum.rerank / n
        );
        observer.on_epoch(epoch, params)?;
    }
    Ok(log)
}

/// Finite-difference check of each loss and their sum on a small random
/// model in 64-bit precision.
#[derive(Debug, Clone)]
pub struct ModelGradCheck {
    pub loss: &'static str,
    pub report: GradCheckReport,
}

/// Builds a random `D = 8`, two-block model over a tiny synthetic batch and
/// checks the analytic gradients of `L_I`, `L_II`, `L_III` and their sum.
pub fn check_model_gradients(seed: u64, epsilon: f64, tolerance: f64) -> Result<Vec<ModelGradCheck>> {
    let instances = generate_synthetic(&SyntheticSpec {
        seed,
        num_instances: 3,
        dev_instances: 0,
        docs_per_instance: 1,
        paragraphs_per_doc: 3,
        paragraph_len_range: (5, 8),
        vocab_size: 48,
        distractor_rate: 0.5,
    })?;
    let vocab = Vocabulary::build(&instances);
    let pre = PreprocessConfig {
        merge_threshold: 8,
        top_k_paragraphs: 3,
        max_seq_len: 16,
        stride: 5,
    };
    let data = prepare_all(&instances, &pre, &vocab)?;
    let model = ModelConfig {
        vocab_size: vocab.len(),
        hidden: 8,
        layers: 2,
        heads: 2,
        max_seq_len: 16,
    };
    let params = ModelParams::<f64>::init(model, seed, 0.3)?;
    let cfg = TrainConfig {
        retrieve_depth: 1,
        proposals: 6,
        nms_keep: 3,
        max_answer_len: 4,
        dropout: 0.0,
        ..TrainConfig::default()
    };
    let x: Vec<&Segment> = data.iter().flat_map(|d| d.segments.iter().take(2)).collect();
    let x_tilde: Vec<ReadItem<'_>> = data
        .iter()
        .flat_map(|d| {
            let pick = d.segments.iter().position(|s| s.is_positive).unwrap_or(0);
            let other = usize::from(pick == 0).min(d.segments.len() - 1);
            [pick, other].into_iter().map(move |s| ReadItem {
                segment: &d.segments[s],
                golds: &d.question.gold_answers,
            })
        })
        .collect();
    let (_, frozen) = step_losses(&params, &x, &x_tilde, &cfg, None, (0.0, 0), [1.0; 3], None)?;

    let mut out = Vec::new();
    for (loss, w) in [
        ("L_I", [1.0, 0.0, 0.0]),
        ("L_II", [0.0, 1.0, 0.0]),
        ("L_III", [0.0, 0.0, 1.0]),
        ("J", [1.0, 1.0, 1.0]),
    ] {
        let mut grads = params.zeros_like();
        step_losses(&params, &x, &x_tilde, &cfg, Some(&frozen), (0.0, 0), w, Some(&mut grads))?;
        let mut failure = None;
        let report = gradient_check(
            &params,
            &grads,
            |p| match step_losses(p, &x, &x_tilde, &cfg, Some(&frozen), (0.0, 0), w, None) {
                Ok((l, _)) => l.weighted(w),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            },
            epsilon,
            tolerance,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        out.push(ModelGradCheck { loss, report });
    }
    Ok(out)
}
