use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Hidden size `D_h`.
    pub hidden: usize,
    /// Number of transformer blocks `I`.
    pub layers: usize,
    pub heads: usize,
    /// Sequence length `L_x`.
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn ffn(&self) -> usize {
        4 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hidden == 0 || self.heads == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

/// One post-layer-norm transformer block. Linear weights are stored
/// `[in, out]` and applied to row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<F> {
    pub query_w: Array2<F>,
    pub query_b: Array1<F>,
    pub key_w: Array2<F>,
    pub key_b: Array1<F>,
    pub value_w: Array2<F>,
    pub value_b: Array1<F>,
    pub out_w: Array2<F>,
    pub out_b: Array1<F>,
    pub ln1_gamma: Array1<F>,
    pub ln1_beta: Array1<F>,
    pub ff1_w: Array2<F>,
    pub ff1_b: Array1<F>,
    pub ff2_w: Array2<F>,
    pub ff2_b: Array1<F>,
    pub ln2_gamma: Array1<F>,
    pub ln2_beta: Array1<F>,
}

/// Retriever, reader and reranker parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<F> {
    /// Self-aligning weights over `h^J` (`w_μ`).
    pub retrieve_align: Array1<F>,
    /// `W_r`, `[D_h, D_h]`.
    pub retrieve_proj: Array2<F>,
    /// `w_r`, `[D_h, 2]`; column 0 is the positive class.
    pub retrieve_out: Array2<F>,
    pub start: Array1<F>,
    pub end: Array1<F>,
    /// Self-aligning weights inside a span (`w_η`).
    pub rerank_align: Array1<F>,
    /// `W_a`, `[D_h, D_h]`.
    pub rerank_proj: Array2<F>,
    /// `w_a`.
    pub rerank_out: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub word: Array2<F>,
    pub token_type: Array2<F>,
    pub position: Array2<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub heads: HeadParams<F>,
}

/// Borrowed view of one named parameter tensor.
#[derive(Debug)]
pub struct TensorRef<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [F],
}

/// Anything exposing an ordered list of named parameter tensors.
pub trait Parameters<F> {
    fn tensors(&self) -> Vec<TensorRef<'_, F>>;
    /// Same order as [`Parameters::tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut [F]>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }
}

fn push1<'a, F>(out: &mut Vec<TensorRef<'a, F>>, name: String, a: &'a Array1<F>) {
    out.push(TensorRef {
        name,
        shape: vec![a.len()],
        data: a.as_slice().expect("contiguous"),
    });
}

fn push2<'a, F>(out: &mut Vec<TensorRef<'a, F>>, name: String, a: &'a Array2<F>) {
    out.push(TensorRef {
        name,
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("contiguous"),
    });
}

macro_rules! slice_mut {
    ($a:expr) => {
        $a.as_slice_mut().expect("contiguous")
    };
}

impl<F: Real> Parameters<F> for ModelParams<F> {
    fn tensors(&self) -> Vec<TensorRef<'_, F>> {
        let mut out = Vec::new();
        push2(&mut out, "embeddings.word".into(), &self.word);
        push2(&mut out, "embeddings.token_type".into(), &self.token_type);
        push2(&mut out, "embeddings.position".into(), &self.position);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            push2(&mut out, p("attention.query.weight"), &b.query_w);
            push1(&mut out, p("attention.query.bias"), &b.query_b);
            push2(&mut out, p("attention.key.weight"), &b.key_w);
            push1(&mut out, p("attention.key.bias"), &b.key_b);
            push2(&mut out, p("attention.value.weight"), &b.value_w);
            push1(&mut out, p("attention.value.bias"), &b.value_b);
            push2(&mut out, p("attention.output.weight"), &b.out_w);
            push1(&mut out, p("attention.output.bias"), &b.out_b);
            push1(&mut out, p("ln1.gamma"), &b.ln1_gamma);
            push1(&mut out, p("ln1.beta"), &b.ln1_beta);
            push2(&mut out, p("ffn.inner.weight"), &b.ff1_w);
            push1(&mut out, p("ffn.inner.bias"), &b.ff1_b);
            push2(&mut out, p("ffn.output.weight"), &b.ff2_w);
            push1(&mut out, p("ffn.output.bias"), &b.ff2_b);
            push1(&mut out, p("ln2.gamma"), &b.ln2_gamma);
            push1(&mut out, p("ln2.beta"), &b.ln2_beta);
        }
        let h = &self.heads;
        push1(&mut out, "retriever.align".into(), &h.retrieve_align);
        push2(&mut out, "retriever.proj".into(), &h.retrieve_proj);
        push2(&mut out, "retriever.out".into(), &h.retrieve_out);
        push1(&mut out, "reader.start".into(), &h.start);
        push1(&mut out, "reader.end".into(), &h.end);
        push1(&mut out, "reranker.align".into(), &h.rerank_align);
        push2(&mut out, "reranker.proj".into(), &h.rerank_proj);
        push1(&mut out, "reranker.out".into(), &h.rerank_out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = vec![
            slice_mut!(self.word),
            slice_mut!(self.token_type),
            slice_mut!(self.position),
        ];
        for b in &mut self.blocks {
            out.extend([
                slice_mut!(b.query_w),
                slice_mut!(b.query_b),
                slice_mut!(b.key_w),
                slice_mut!(b.key_b),
                slice_mut!(b.value_w),
                slice_mut!(b.value_b),
                slice_mut!(b.out_w),
                slice_mut!(b.out_b),
                slice_mut!(b.ln1_gamma),
                slice_mut!(b.ln1_beta),
                slice_mut!(b.ff1_w),
                slice_mut!(b.ff1_b),
                slice_mut!(b.ff2_w),
                slice_mut!(b.ff2_b),
                slice_mut!(b.ln2_gamma),
                slice_mut!(b.ln2_beta),
            ]);
        }
        let h = &mut self.heads;
        out.extend([
            slice_mut!(h.retrieve_align),
            slice_mut!(h.retrieve_proj),
            slice_mut!(h.retrieve_out),
            slice_mut!(h.start),
            slice_mut!(h.end),
            slice_mut!(h.rerank_align),
            slice_mut!(h.rerank_proj),
            slice_mut!(h.rerank_out),
        ]);
        out
    }
}

impl<F: Real> ModelParams<F> {
    /// All-zero parameters (also the gradient accumulator layout).
    pub fn zeros(config: ModelConfig) -> Self {
        let d = config.hidden;
        let f = config.ffn();
        let m = |r, c| Array2::zeros((r, c));
        let v = |n| Array1::zeros(n);
        let block = || BlockParams {
            query_w: m(d, d),
            query_b: v(d),
            key_w: m(d, d),
            key_b: v(d),
            value_w: m(d, d),
            value_b: v(d),
            out_w: m(d, d),
            out_b: v(d),
            ln1_gamma: v(d),
            ln1_beta: v(d),
            ff1_w: m(d, f),
            ff1_b: v(f),
            ff2_w: m(f, d),
            ff2_b: v(d),
            ln2_gamma: v(d),
            ln2_beta: v(d),
        };
        ModelParams {
            config,
            word: m(config.vocab_size, d),
            token_type: m(2, d),
            position: m(config.max_seq_len, d),
            blocks: (0..config.layers).map(|_| block()).collect(),
            heads: HeadParams {
                retrieve_align: v(d),
                retrieve_proj: m(d, d),
                retrieve_out: m(d, 2),
                start: v(d),
                end: v(d),
                rerank_align: v(d),
                rerank_proj: m(d, d),
                rerank_out: v(d),
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    /// Normal(0, std) weights and embeddings, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let mut fill2 = |a: &mut Array2<F>| a.mapv_inplace(|_| F::of(normal.sample(&mut rng)));
        fill2(&mut p.word);
        fill2(&mut p.token_type);
        fill2(&mut p.position);
        for b in &mut p.blocks {
            for w in [&mut b.query_w, &mut b.key_w, &mut b.value_w, &mut b.out_w, &mut b.ff1_w, &mut b.ff2_w] {
                fill2(w);
            }
            b.ln1_gamma.fill(F::one());
            b.ln2_gamma.fill(F::one());
        }
        fill2(&mut p.heads.retrieve_proj);
        fill2(&mut p.heads.retrieve_out);
        fill2(&mut p.heads.rerank_proj);
        let mut fill1 = |a: &mut Array1<F>| a.mapv_inplace(|_| F::of(normal.sample(&mut rng)));
        let h = &mut p.heads;
        for w in [&mut h.retrieve_align, &mut h.start, &mut h.end, &mut h.rerank_align, &mut h.rerank_out] {
            fill1(w);
        }
        Ok(p)
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(F::zero());
        }
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|&v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Element-type conversion, e.g. to run a trained `f32` model in `f64`.
    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let mut out = ModelParams::<G>::zeros(self.config);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src.data) {
                *d = G::of(s.as_f64());
            }
        }
        out
    }

    /// Writes the checkpoint: a text header naming every tensor and its
    /// shape, then all values as 32-bit little-endian floats in header order.
    ///
    /// ```text
    /// re3qa-checkpoint v1
    /// dtype f32
    /// config vocab_size=.. hidden=.. layers=.. heads=.. max_seq_len=..
    /// tensors <count>
    /// <name> <d0>x<d1>
    /// ...
    /// end
    /// <binary payload>
    /// ```
    pub fn write_checkpoint(&self, mut w: impl Write) -> std::io::Result<()> {
        let c = self.config;
        let tensors = self.tensors();
        writeln!(w, "re3qa-checkpoint v1")?;
        writeln!(w, "dtype f32")?;
        writeln!(
            w,
            "config vocab_size={} hidden={} layers={} heads={} max_seq_len={}",
            c.vocab_size, c.hidden, c.layers, c.heads, c.max_seq_len
        )?;
        writeln!(w, "tensors {}", tensors.len())?;
        for t in &tensors {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            writeln!(w, "{} {}", t.name, dims.join("x"))?;
        }
        writeln!(w, "end")?;
        for t in &tensors {
            for &v in t.data {
                w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_checkpoint(BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut lineno = 0;
        let mut next_line = |r: &mut BufReader<_>| -> Result<String> {
            let mut s = String::new();
            lineno += 1;
            let n = r.read_line(&mut s).map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            if n == 0 {
                return Err(Error::Parse {
                    line: lineno,
                    message: "unexpected end of checkpoint header".into(),
                });
            }
            Ok(s.trim_end().to_string())
        };
        let bad = |line: usize, m: &str| Error::Parse {
            line,
            message: m.to_string(),
        };
        if next_line(&mut r)? != "re3qa-checkpoint v1" {
            return Err(bad(1, "not a re3qa checkpoint"));
        }
        if next_line(&mut r)? != "dtype f32" {
            return Err(bad(2, "unsupported dtype"));
        }
        let cfg_line = next_line(&mut r)?;
        let mut cfg = [0usize; 5];
        let keys = ["vocab_size", "hidden", "layers", "heads", "max_seq_len"];
        let fields: Vec<&str> = cfg_line
            .strip_prefix("config ")
            .ok_or_else(|| bad(3, "missing config line"))?
            .split_whitespace()
            .collect();
        if fields.len() != keys.len() {
            return Err(bad(3, "malformed config line"));
        }
        for ((slot, key), field) in cfg.iter_mut().zip(keys).zip(fields) {
            let (k, v) = field.split_once('=').ok_or_else(|| bad(3, "malformed config entry"))?;
            if k != key {
                return Err(bad(3, &format!("expected `{key}`, found `{k}`")));
            }
            *slot = v.parse().map_err(|_| bad(3, &format!("bad value for `{key}`")))?;
        }
        let config = ModelConfig {
            vocab_size: cfg[0],
            hidden: cfg[1],
            layers: cfg[2],
            heads: cfg[3],
            max_seq_len: cfg[4],
        };
        config.validate()?;
        let count_line = next_line(&mut r)?;
        let count: usize = count_line
            .strip_prefix("tensors ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad(4, "missing tensor count"))?;
        let mut params = Self::zeros(config);
        let expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.shape))
            .collect();
        if count != expected.len() {
            return Err(Error::Validation(format!(
                "checkpoint lists {count} tensors, model needs {}",
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            let line = next_line(&mut r)?;
            let (n, dims) = line.split_once(' ').ok_or_else(|| bad(0, "malformed tensor line"))?;
            let dims: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(0, "bad tensor shape")))
                .collect::<Result<_>>()?;
            if n != name || &dims != shape {
                return Err(Error::Shape {
                    name: n.to_string(),
                    expected: shape.clone(),
                    found: dims,
                });
            }
        }
        if next_line(&mut r)? != "end" {
            return Err(bad(0, "missing end of header"));
        }
        let mut buf = [0u8; 4];
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                r.read_exact(&mut buf)
                    .map_err(|e| bad(0, &format!("truncated payload: {e}")))?;
                *v = F::of(f32::from_le_bytes(buf) as f64);
            }
        }
        if r.read(&mut buf).map_err(|e| bad(0, &e.to_string()))? != 0 {
            return Err(bad(0, "trailing bytes after payload"));
        }
        Ok(params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(file)
    }

    /// Loads and checks the stored shapes against an expected configuration.
    pub fn load_checked(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Self> {
        let p = Self::load(path)?;
        if p.config != *config {
            return Err(Error::Validation(format!(
                "checkpoint config {:?} does not match expected {config:?}",
                p.config
            )));
        }
        Ok(p)
    }
}
