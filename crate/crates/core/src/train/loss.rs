//! The three training objectives. Each returns the batch-mean loss and the
//! gradient of that mean with respect to its score inputs.

use serde::{Deserialize, Serialize};

use crate::encoder::ops::{log_softmax, softmax, softmax_backward};
use crate::Real;

/// How reranker scores are turned into a distribution for the soft term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankNorm {
    #[default]
    Softmax,
    /// `p_i = s_i / Σ s_j`, undefined when the sum vanishes.
    Sum,
}

impl std::str::FromStr for RerankNorm {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "softmax" => Ok(RerankNorm::Softmax),
            "sum" => Ok(RerankNorm::Sum),
            other => Err(crate::Error::Config(format!(
                "unknown rerank normalization `{other}` (expected softmax or sum)"
            ))),
        }
    }
}

/// Cross-entropy of one example with a possibly multi-hot target: returns
/// `-Σ y log softmax(z)` and its gradient `(Σ y) p - y`.
fn multi_hot_ce<F: Real>(z: &[F], y: impl Fn(usize) -> f64) -> (F, Vec<F>) {
    let logp = log_softmax(z);
    let mut mass = F::zero();
    let mut loss = F::zero();
    for (i, &lp) in logp.iter().enumerate() {
        let yi = y(i);
        if yi != 0.0 {
            let yi = F::of(yi);
            loss -= yi * lp;
            mass += yi;
        }
    }
    let grad = logp
        .iter()
        .enumerate()
        .map(|(i, &lp)| mass * lp.exp() - F::of(y(i)))
        .collect();
    (loss, grad)
}

/// Retrieval cross-entropy, averaged over the batch.
pub fn loss_retrieve<F: Real>(scores: &[[F; 2]], labels: &[[f64; 2]]) -> (F, Vec<[F; 2]>) {
    if scores.is_empty() {
        return (F::zero(), Vec::new());
    }
    let n = F::of(scores.len() as f64);
    let mut total = F::zero();
    let grads = scores
        .iter()
        .zip(labels)
        .map(|(s, y)| {
            let (l, g) = multi_hot_ce(s, |i| y[i]);
            total += l;
            [g[0] / n, g[1] / n]
        })
        .collect();
    (total / n, grads)
}

/// Start/end scores and multi-hot labels of one segment.
pub struct ReadExample<'a, F> {
    pub start: &'a [F],
    pub end: &'a [F],
    pub start_labels: &'a [u8],
    pub end_labels: &'a [u8],
}

/// Sum of start and end cross-entropies against unnormalized multi-hot
/// labels, averaged over the batch. Returns `(loss, d_start, d_end)`.
pub fn loss_read<F: Real>(batch: &[ReadExample<'_, F>]) -> (F, Vec<Vec<F>>, Vec<Vec<F>>) {
    if batch.is_empty() {
        return (F::zero(), Vec::new(), Vec::new());
    }
    let n = F::of(batch.len() as f64);
    let mut total = F::zero();
    let mut ds = Vec::with_capacity(batch.len());
    let mut de = Vec::with_capacity(batch.len());
    for ex in batch {
        let (ls, gs) = multi_hot_ce(ex.start, |i| ex.start_labels[i] as f64);
        let (le, ge) = multi_hot_ce(ex.end, |i| ex.end_labels[i] as f64);
        total += ls + le;
        ds.push(gs.into_iter().map(|g| g / n).collect());
        de.push(ge.into_iter().map(|g| g / n).collect());
    }
    (total / n, ds, de)
}

/// Reranker scores of one segment's candidates with labels padded to `M*`.
/// Slots beyond `scores.len()` are ignored.
pub struct RerankExample<'a, F> {
    pub scores: &'a [F],
    pub hard: &'a [f64],
    pub soft: &'a [f64],
}

/// Hard-label cross-entropy plus squared distance between the soft labels
/// and the normalized scores, averaged over the batch.
pub fn loss_rerank<F: Real>(batch: &[RerankExample<'_, F>], norm: RerankNorm) -> (F, Vec<Vec<F>>) {
    if batch.is_empty() {
        return (F::zero(), Vec::new());
    }
    let n = F::of(batch.len() as f64);
    let mut total = F::zero();
    let grads = batch
        .iter()
        .map(|ex| {
            if ex.scores.is_empty() {
                return Vec::new();
            }
            let (hard_loss, mut grad) = multi_hot_ce(ex.scores, |i| ex.hard[i]);
            let sum: F = ex.scores.iter().copied().sum();
            let p: Vec<F> = match norm {
                RerankNorm::Softmax => softmax(ex.scores),
                RerankNorm::Sum => ex.scores.iter().map(|&s| s / sum).collect(),
            };
            let mut soft_loss = F::zero();
            let dp: Vec<F> = p
                .iter()
                .enumerate()
                .map(|(i, &pi)| {
                    let r = F::of(ex.soft[i]) - pi;
                    soft_loss += r * r;
                    F::of(-2.0) * r
                })
                .collect();
            let ds = match norm {
                RerankNorm::Softmax => softmax_backward(&p, &dp),
                RerankNorm::Sum => {
                    let dot: F = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                    dp.iter().map(|&g| (g - dot) / sum).collect()
                }
            };
            for (g, d) in grad.iter_mut().zip(ds) {
                *g += d;
            }
            total += hard_loss + soft_loss;
            grad.into_iter().map(|g| g / n).collect()
        })
        .collect();
    (total / n, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn retrieve_values() {
        assert!((loss_retrieve(&[[0.0f64, 0.0]], &[[1.0, 0.0]]).0 - LN2).abs() < 1e-12);
        assert!(loss_retrieve(&[[100.0f64, 0.0]], &[[1.0, 0.0]]).0 < 1e-40);
        let want = 100.0 + (-100.0f64).exp().ln_1p();
        assert!((loss_retrieve(&[[0.0f64, 100.0]], &[[1.0, 0.0]]).0 - want).abs() < 1e-12);
        let (l, g) = loss_retrieve(&[[0.0f64, 0.0], [0.0, 100.0]], &[[1.0, 0.0], [1.0, 0.0]]);
        assert!((l - (LN2 + want) / 2.0).abs() < 1e-12);
        assert_eq!(g[0], [-0.25, 0.25]);
        assert_eq!(loss_retrieve::<f64>(&[], &[]).0, 0.0);
    }

    #[test]
    fn read_values() {
        let z = [0.0f64; 2];
        let ex = ReadExample { start: &z, end: &z, start_labels: &[0, 1], end_labels: &[0, 1] };
        assert!((loss_read(&[ex]).0 - 2.0 * LN2).abs() < 1e-12);

        let z = [0.0f64; 4];
        let ex = ReadExample { start: &z, end: &z, start_labels: &[1, 0, 1, 0], end_labels: &[0, 0, 0, 1] };
        let (l, ds, _) = loss_read(&[ex]);
        assert!((l - 3.0 * 4.0f64.ln()).abs() < 1e-12);
        assert!((l - 4.158883).abs() < 1e-6);
        assert_eq!(ds[0], vec![-0.5, 0.5, -0.5, 0.5]);

        let z = [0.0, 1e3, 0.0];
        let ex = ReadExample { start: &z, end: &z, start_labels: &[0, 1, 0], end_labels: &[0, 1, 0] };
        assert!(loss_read(&[ex]).0 < 1e-12);

        let z = [1.0, f64::NEG_INFINITY, 2.0];
        let ex = ReadExample { start: &z, end: &z, start_labels: &[1, 0, 0], end_labels: &[1, 0, 0] };
        let (l, ds, _) = loss_read(&[ex]);
        assert!(l.is_finite());
        assert_eq!(ds[0][1], 0.0);
    }

    #[test]
    fn rerank_values() {
        let z = [0.0f64; 5];
        let y = [1.0, 0.0, 0.0, 0.0, 0.0];
        let ex = RerankExample { scores: &z, hard: &y, soft: &y };
        let (l, _) = loss_rerank(&[ex], RerankNorm::Softmax);
        assert!((l - (5.0f64.ln() + 0.8)).abs() < 1e-12);
        assert!((l - 2.409438).abs() < 1e-6);

        let ex = RerankExample { scores: &z, hard: &[0.0; 5], soft: &y };
        assert!((loss_rerank(&[ex], RerankNorm::Softmax).0 - 0.8).abs() < 1e-12);

        let z = [50.0, 0.0, 0.0];
        let ex = RerankExample { scores: &z, hard: &[1.0, 0.0, 0.0, 0.0, 0.0], soft: &[1.0, 0.0, 0.0, 0.0, 0.0] };
        assert!(loss_rerank(&[ex], RerankNorm::Softmax).0 < 1e-20);

        let z = [1.0, 3.0];
        let ex = RerankExample { scores: &z, hard: &[0.0, 1.0, 0.0], soft: &[0.5, 1.0, 0.0] };
        let (l, _) = loss_rerank(&[ex], RerankNorm::Sum);
        let want = -(3.0f64.exp() / (1.0f64.exp() + 3.0f64.exp())).ln() + 0.25f64.powi(2) + 0.25f64.powi(2);
        assert!((l - want).abs() < 1e-12);
    }

    fn numeric(f: impl Fn(&[f64]) -> f64, z: &[f64]) -> Vec<f64> {
        let eps = 1e-6;
        (0..z.len())
            .map(|i| {
                let mut a = z.to_vec();
                let mut b = z.to_vec();
                a[i] += eps;
                b[i] -= eps;
                (f(&a) - f(&b)) / (2.0 * eps)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn gradients_and_signs(
            z in prop::collection::vec(-3.0f64..3.0, 2..6),
            pos in 0usize..6,
            soft in prop::collection::vec(0.0f64..1.0, 6),
            use_sum in any::<bool>(),
        ) {
            let pos = pos % z.len();
            let labels: Vec<u8> = (0..z.len()).map(|i| u8::from(i == pos || i == 0)).collect();
            let read = |s: &[f64]| {
                loss_read(&[ReadExample { start: s, end: &z, start_labels: &labels, end_labels: &labels }]).0
            };
            let (l, ds, _) = loss_read(&[ReadExample { start: &z, end: &z, start_labels: &labels, end_labels: &labels }]);
            prop_assert!(l >= 0.0);
            for (a, n) in ds[0].iter().zip(numeric(read, &z)) {
                prop_assert!((a - n).abs() < 1e-6);
            }

            let mut hard = vec![0.0; 6];
            hard[pos] = 1.0;
            let mut soft = soft;
            soft[pos] = 1.0;
            // keep sums away from zero for the literal normalization
            let zz: Vec<f64> = if use_sum { z.iter().map(|v| v.abs() + 0.5).collect() } else { z.clone() };
            let norm = if use_sum { RerankNorm::Sum } else { RerankNorm::Softmax };
            let rr = |s: &[f64]| loss_rerank(&[RerankExample { scores: s, hard: &hard, soft: &soft }], norm).0;
            let (l, g) = loss_rerank(&[RerankExample { scores: &zz, hard: &hard, soft: &soft }], norm);
            prop_assert!(l >= 0.0);
            for (a, n) in g[0].iter().zip(numeric(rr, &zz)) {
                prop_assert!((a - n).abs() < 1e-5 * n.abs().max(1.0));
            }

            let pair = [z[0], z[1]];
            let (l, g) = loss_retrieve(&[pair], &[[0.0, 1.0]]);
            prop_assert!(l >= 0.0);
            let f = |s: &[f64]| loss_retrieve(&[[s[0], s[1]]], &[[0.0, 1.0]]).0;
            for (a, n) in g[0].iter().zip(numeric(f, &pair)) {
                prop_assert!((a - n).abs() < 1e-6);
            }
        }
    }
}
