//! Row-wise kernels shared by the blocks and heads.

use ndarray::{Array1, Array2, Axis};

use crate::Real;

pub(crate) const LN_EPS: f64 = 1e-12;

/// In-place softmax over a row.
pub(crate) fn softmax_inplace<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn softmax<F: Real>(x: &[F]) -> Vec<F> {
    let mut out = x.to_vec();
    softmax_inplace(&mut out);
    out
}

/// Numerically stable `log(softmax(x))`.
pub(crate) fn log_softmax<F: Real>(x: &[F]) -> Vec<F> {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = x.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
    x.iter().map(|&v| v - lse).collect()
}

/// Given `p = softmax(z)` and `dL/dp`, returns `dL/dz`.
pub(crate) fn softmax_backward<F: Real>(p: &[F], dp: &[F]) -> Vec<F> {
    let dot: F = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
    p.iter().zip(dp).map(|(&pi, &gi)| pi * (gi - dot)).collect()
}

pub(crate) struct LayerNormCache<F> {
    pub xhat: Array2<F>,
    pub rstd: Vec<F>,
}

pub(crate) fn layer_norm<F: Real>(
    x: &Array2<F>,
    gamma: &Array1<F>,
    beta: &Array1<F>,
) -> (Array2<F>, LayerNormCache<F>) {
    let d = F::of(x.ncols() as f64);
    let eps = F::of(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Vec::with_capacity(x.nrows());
    for mut row in xhat.axis_iter_mut(Axis(0)) {
        let mean = row.iter().copied().sum::<F>() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / d;
        let r = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * r);
        rstd.push(r);
    }
    let y = &xhat * gamma + beta;
    (y, LayerNormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward<F: Real>(
    dy: &Array2<F>,
    cache: &LayerNormCache<F>,
    gamma: &Array1<F>,
    dgamma: &mut Array1<F>,
    dbeta: &mut Array1<F>,
) -> Array2<F> {
    *dgamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let d = F::of(dy.ncols() as f64);
    let mut dx = dy * gamma;
    for ((mut row, xh), &r) in dx
        .axis_iter_mut(Axis(0))
        .zip(cache.xhat.axis_iter(Axis(0)))
        .zip(&cache.rstd)
    {
        let mean_g = row.iter().copied().sum::<F>() / d;
        let mean_gx = row.iter().zip(xh.iter()).map(|(&g, &x)| g * x).sum::<F>() / d;
        row.zip_mut_with(&xh, |g, &x| *g = r * (*g - mean_g - x * mean_gx));
    }
    dx
}

const GELU_C: f64 = 0.044_715;

fn gelu_k() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

/// Tanh approximation of GELU.
pub(crate) fn gelu<F: Real>(x: F) -> F {
    let k = F::of(gelu_k());
    let u = k * (x + F::of(GELU_C) * x * x * x);
    F::of(0.5) * x * (F::one() + u.tanh())
}

pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let k = F::of(gelu_k());
    let c = F::of(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    let half = F::of(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + F::of(3.0) * c * x * x)
}
