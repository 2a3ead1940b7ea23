//! Post-layer-norm transformer block over a batch laid out as `[B * L, D]`.
//!
//! ```text
//! a = LN1(x + Dropout(MultiHeadAttention(x)))
//! y = LN2(a + Dropout(W2 · GELU(W1 · a)))
//! ```
//!
//! Keys beyond each segment's valid prefix are masked out of attention.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops::{gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_inplace, LayerNormCache};
use super::params::BlockParams;
use crate::Real;

/// Inverted dropout driven by a seeded stream.
pub(crate) struct Dropout {
    pub p: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    /// `None` when dropout is disabled.
    pub fn mask<F: Real>(&mut self, shape: (usize, usize)) -> Option<Array2<F>> {
        if self.p <= 0.0 {
            return None;
        }
        let keep = F::of(1.0 / (1.0 - self.p));
        let p = self.p;
        let rng = &mut self.rng;
        Some(Array2::from_shape_simple_fn(shape, || {
            if rng.random::<f64>() < p {
                F::zero()
            } else {
                keep
            }
        }))
    }
}

pub(crate) struct BlockTape<F> {
    x: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Attention probabilities per `(segment, head)`, shape `[L, valid]`.
    pub probs: Vec<Array2<F>>,
    ctx: Array2<F>,
    attn_drop: Option<Array2<F>>,
    ln1: LayerNormCache<F>,
    a: Array2<F>,
    f1: Array2<F>,
    g: Array2<F>,
    ffn_drop: Option<Array2<F>>,
    ln2: LayerNormCache<F>,
}

pub(crate) struct Layout<'a> {
    pub seq_len: usize,
    pub valid_lens: &'a [usize],
    pub heads: usize,
}

fn linear<F: Real>(x: &Array2<F>, w: &Array2<F>, b: &ndarray::Array1<F>) -> Array2<F> {
    let mut y = x.dot(w);
    y += b;
    y
}

pub(crate) fn forward<F: Real>(
    p: &BlockParams<F>,
    x: &Array2<F>,
    layout: &Layout<'_>,
    mut dropout: Option<&mut Dropout>,
    record: bool,
) -> (Array2<F>, Option<BlockTape<F>>) {
    let l = layout.seq_len;
    let d = x.ncols();
    let dh = d / layout.heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());

    let q = linear(x, &p.query_w, &p.query_b);
    let k = linear(x, &p.key_w, &p.key_b);
    let v = linear(x, &p.value_w, &p.value_b);
    let mut ctx = Array2::<F>::zeros(x.raw_dim());
    let mut probs = Vec::with_capacity(if record { layout.valid_lens.len() * layout.heads } else { 0 });
    for (b, &vl) in layout.valid_lens.iter().enumerate() {
        let rows = b * l..(b + 1) * l;
        let keys = b * l..b * l + vl;
        for h in 0..layout.heads {
            let cols = h * dh..(h + 1) * dh;
            let qb = q.slice(s![rows.clone(), cols.clone()]);
            let kb = k.slice(s![keys.clone(), cols.clone()]);
            let vb = v.slice(s![keys.clone(), cols.clone()]);
            let mut sc = Array2::<F>::zeros((l, vl));
            general_mat_mul(scale, &qb, &kb.t(), F::zero(), &mut sc);
            for mut row in sc.axis_iter_mut(Axis(0)) {
                softmax_inplace(row.as_slice_mut().expect("row-major"));
            }
            let mut out = ctx.slice_mut(s![rows.clone(), cols]);
            general_mat_mul(F::one(), &sc, &vb, F::zero(), &mut out);
            if record {
                probs.push(sc);
            }
        }
    }

    let mut attn = linear(&ctx, &p.out_w, &p.out_b);
    let attn_drop = dropout.as_deref_mut().and_then(|dr| dr.mask::<F>(attn.dim()));
    if let Some(m) = &attn_drop {
        attn *= m;
    }
    attn += x;
    let (a, ln1) = layer_norm(&attn, &p.ln1_gamma, &p.ln1_beta);

    let f1 = linear(&a, &p.ff1_w, &p.ff1_b);
    let g = f1.mapv(gelu);
    let mut f2 = linear(&g, &p.ff2_w, &p.ff2_b);
    let ffn_drop = dropout.and_then(|dr| dr.mask::<F>(f2.dim()));
    if let Some(m) = &ffn_drop {
        f2 *= m;
    }
    f2 += &a;
    let (y, ln2) = layer_norm(&f2, &p.ln2_gamma, &p.ln2_beta);

    let tape = record.then(|| BlockTape {
        x: x.clone(),
        q,
        k,
        v,
        probs,
        ctx,
        attn_drop,
        ln1,
        a,
        f1,
        g,
        ffn_drop,
        ln2,
    });
    (y, tape)
}

/// Accumulates parameter gradients into `grads` and returns `dL/dx`.
pub(crate) fn backward<F: Real>(
    p: &BlockParams<F>,
    t: &BlockTape<F>,
    dy: &Array2<F>,
    layout: &Layout<'_>,
    grads: &mut BlockParams<F>,
) -> Array2<F> {
    let l = layout.seq_len;
    let d = dy.ncols();
    let dh = d / layout.heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let one = F::one();

    // feed-forward half
    let dr2 = layer_norm_backward(dy, &t.ln2, &p.ln2_gamma, &mut grads.ln2_gamma, &mut grads.ln2_beta);
    let mut da = dr2.clone();
    let mut df2 = dr2;
    if let Some(m) = &t.ffn_drop {
        df2 *= m;
    }
    general_mat_mul(one, &t.g.t(), &df2, one, &mut grads.ff2_w);
    grads.ff2_b += &df2.sum_axis(Axis(0));
    let mut df1 = df2.dot(&p.ff2_w.t());
    df1.zip_mut_with(&t.f1, |g, &x| *g *= gelu_grad(x));
    general_mat_mul(one, &t.a.t(), &df1, one, &mut grads.ff1_w);
    grads.ff1_b += &df1.sum_axis(Axis(0));
    general_mat_mul(one, &df1, &p.ff1_w.t(), one, &mut da);

    // attention half
    let dr1 = layer_norm_backward(&da, &t.ln1, &p.ln1_gamma, &mut grads.ln1_gamma, &mut grads.ln1_beta);
    let mut dx = dr1.clone();
    let mut dattn = dr1;
    if let Some(m) = &t.attn_drop {
        dattn *= m;
    }
    general_mat_mul(one, &t.ctx.t(), &dattn, one, &mut grads.out_w);
    grads.out_b += &dattn.sum_axis(Axis(0));
    let dctx = dattn.dot(&p.out_w.t());

    let mut dq = Array2::<F>::zeros(dy.raw_dim());
    let mut dk = Array2::<F>::zeros(dy.raw_dim());
    let mut dv = Array2::<F>::zeros(dy.raw_dim());
    for (b, &vl) in layout.valid_lens.iter().enumerate() {
        let rows = b * l..(b + 1) * l;
        let keys = b * l..b * l + vl;
        for h in 0..layout.heads {
            let cols = h * dh..(h + 1) * dh;
            let pr = &t.probs[b * layout.heads + h];
            let dc = dctx.slice(s![rows.clone(), cols.clone()]);
            let qb = t.q.slice(s![rows.clone(), cols.clone()]);
            let kb = t.k.slice(s![keys.clone(), cols.clone()]);
            let vb = t.v.slice(s![keys.clone(), cols.clone()]);

            general_mat_mul(one, &pr.t(), &dc, one, &mut dv.slice_mut(s![keys.clone(), cols.clone()]));
            let mut ds = dc.dot(&vb.t());
            for (mut drow, prow) in ds.axis_iter_mut(Axis(0)).zip(pr.axis_iter(Axis(0))) {
                let dotp: F = drow.iter().zip(prow.iter()).map(|(&g, &p)| g * p).sum();
                drow.zip_mut_with(&prow, |g, &p| *g = p * (*g - dotp) * scale);
            }
            general_mat_mul(one, &ds, &kb, one, &mut dq.slice_mut(s![rows.clone(), cols.clone()]));
            general_mat_mul(one, &ds.t(), &qb, one, &mut dk.slice_mut(s![keys.clone(), cols]));
        }
    }

    for (dproj, w, gw, gb) in [
        (&dq, &p.query_w, &mut grads.query_w, &mut grads.query_b),
        (&dk, &p.key_w, &mut grads.key_w, &mut grads.key_b),
        (&dv, &p.value_w, &mut grads.value_w, &mut grads.value_b),
    ] {
        general_mat_mul(one, &t.x.t(), dproj, one, gw);
        *gb += &dproj.sum_axis(Axis(0));
        general_mat_mul(one, dproj, &w.t(), one, &mut dx);
    }
    dx
}
