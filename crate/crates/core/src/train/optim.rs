//! Adam with a linear warmup schedule and global-norm clipping.

use crate::encoder::{ModelParams, Parameters};
use crate::{Error, Real, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates plus the update count.
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub m: ModelParams<F>,
    pub v: ModelParams<F>,
    pub step: u64,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Learning rate at zero-based `step`: ramps linearly from 0 over
/// `warmup_steps`, then stays at `base`.
pub fn scheduled_rate(base: f64, step: u64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 {
        base
    } else {
        base * (step as f64 / warmup_steps as f64).min(1.0)
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut ModelParams<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm.is_finite() {
        let s = F::of(max_norm / norm);
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// One Adam update with bias correction at learning rate `lr`.
pub fn adam_step<F: Real>(
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
    state: &mut OptimizerState<F>,
    lr: f64,
) -> Result<()> {
    if params.config != grads.config || params.config != state.m.config {
        return Err(Error::Shape {
            name: "gradients".into(),
            expected: vec![params.num_parameters()],
            found: vec![grads.num_parameters()],
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = F::of(1.0 - BETA1.powi(t));
    let c2 = F::of(1.0 - BETA2.powi(t));
    let (b1, b2, eps, lr) = (F::of(BETA1), F::of(BETA2), F::of(EPSILON), F::of(lr));
    let one = F::one();
    let g = grads.tensors();
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(g)
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        for i in 0..p.len() {
            let gi = g.data[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;

    fn tiny() -> ModelParams<f64> {
        ModelParams::init(
            ModelConfig {
                vocab_size: 5,
                hidden: 4,
                layers: 1,
                heads: 2,
                max_seq_len: 6,
            },
            1,
            0.1,
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_and_zero_rate_are_no_ops() {
        let mut p = tiny();
        let before = p.clone();
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &before.zeros_like(), &mut st, 1e-3).unwrap();
        assert_eq!(p, before);
        let mut g = p.zeros_like();
        g.word.fill(1.0);
        adam_step(&mut p, &g, &mut st, scheduled_rate(1e-3, 0, 10)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn hand_computed_trajectory() {
        let mut p = tiny();
        let theta0 = p.word[[0, 0]];
        let mut g = p.zeros_like();
        g.word[[0, 0]] = 1.0;
        let mut st = OptimizerState::new(&p);
        let alpha = 0.01;
        // m_1 = 0.1, v_1 = 0.001; both bias-correct to 1
        adam_step(&mut p, &g, &mut st, alpha).unwrap();
        let step1 = theta0 - alpha * 1.0 / (1.0 + EPSILON);
        assert!((p.word[[0, 0]] - step1).abs() < 1e-15);
        // m_2 = 0.19 / 0.19, v_2 = 0.001999 / 0.001999
        adam_step(&mut p, &g, &mut st, alpha).unwrap();
        assert!((p.word[[0, 0]] - (theta0 - 2.0 * alpha / (1.0 + EPSILON))).abs() < 1e-15);
        assert_eq!(p.word[[0, 1]], tiny().word[[0, 1]]);
    }

    #[test]
    fn schedule_and_clip() {
        assert_eq!(scheduled_rate(1.0, 0, 4), 0.0);
        assert_eq!(scheduled_rate(1.0, 2, 4), 0.5);
        assert_eq!(scheduled_rate(1.0, 9, 4), 1.0);
        assert_eq!(scheduled_rate(1.0, 0, 0), 1.0);
        let mut g = tiny().zeros_like();
        g.word[[0, 0]] = 3.0;
        g.position[[1, 1]] = 4.0;
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut g, 2.0), g.global_norm());
    }

    #[test]
    fn mismatched_shapes_error() {
        let mut p = tiny();
        let mut other = p.config;
        other.hidden = 2;
        other.heads = 1;
        let g = ModelParams::<f64>::zeros(other);
        let mut st = OptimizerState::new(&p);
        assert!(adam_step(&mut p, &g, &mut st, 1e-3).is_err());
    }
}
