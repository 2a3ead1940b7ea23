use ndarray::{s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::block::{self, BlockTape, Dropout, Layout};
use super::params::ModelParams;
use crate::preprocess::Segment;
use crate::{Error, Real, Result};

/// Token and type ids of several segments, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub input_ids: Vec<u32>,
    pub type_ids: Vec<u8>,
    pub seq_len: usize,
    /// Non-PAD prefix length of each segment.
    pub valid_lens: Vec<usize>,
}

impl EncoderInput {
    pub fn from_segments<'a>(segments: impl IntoIterator<Item = &'a Segment>) -> Self {
        let mut out = EncoderInput {
            input_ids: Vec::new(),
            type_ids: Vec::new(),
            seq_len: 0,
            valid_lens: Vec::new(),
        };
        for seg in segments {
            out.seq_len = seg.seq_len();
            out.input_ids.extend_from_slice(&seg.input_ids);
            out.type_ids.extend_from_slice(&seg.type_ids);
            out.valid_lens.push(seg.valid_len());
        }
        out
    }

    pub fn batch_size(&self) -> usize {
        self.valid_lens.len()
    }

    fn select(&self, rows: &[usize]) -> Self {
        let l = self.seq_len;
        let mut out = EncoderInput {
            input_ids: Vec::with_capacity(rows.len() * l),
            type_ids: Vec::with_capacity(rows.len() * l),
            seq_len: l,
            valid_lens: Vec::with_capacity(rows.len()),
        };
        for &r in rows {
            out.input_ids.extend_from_slice(&self.input_ids[r * l..(r + 1) * l]);
            out.type_ids.extend_from_slice(&self.type_ids[r * l..(r + 1) * l]);
            out.valid_lens.push(self.valid_lens[r]);
        }
        out
    }
}

/// How a forward pass runs: whether it records a tape for backward, and
/// the dropout rate and seed when training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardMode {
    pub record: bool,
    pub dropout: f64,
    pub seed: u64,
}

impl ForwardMode {
    pub const INFERENCE: ForwardMode = ForwardMode {
        record: false,
        dropout: 0.0,
        seed: 0,
    };

    pub fn training(dropout: f64, seed: u64) -> Self {
        ForwardMode {
            record: true,
            dropout,
            seed,
        }
    }

    /// Recorded but deterministic; used for verification.
    pub fn recorded() -> Self {
        Self::training(0.0, 0)
    }
}

/// Hidden states `h^0..=h^j` of a batch, suspended after block `j`.
pub struct EncoderState<F> {
    input: EncoderInput,
    hidden: Vec<Array2<F>>,
    tapes: Option<Vec<BlockTape<F>>>,
    embed_drop: Option<Array2<F>>,
    dropout: Option<Dropout>,
    /// Blocks applied to single segments so far.
    block_passes: usize,
}

impl<F: Real> EncoderState<F> {
    pub fn depth(&self) -> usize {
        self.hidden.len() - 1
    }

    pub fn top(&self) -> &Array2<F> {
        self.hidden.last().expect("h^0 always present")
    }

    pub fn hidden(&self, depth: usize) -> Option<&Array2<F>> {
        self.hidden.get(depth)
    }

    pub fn input(&self) -> &EncoderInput {
        &self.input
    }

    pub fn block_passes(&self) -> usize {
        self.block_passes
    }

    pub fn seq_len(&self) -> usize {
        self.input.seq_len
    }

    /// Rows of segment `b` in the top hidden state.
    pub fn segment(&self, b: usize) -> ndarray::ArrayView2<'_, F> {
        let l = self.input.seq_len;
        self.top().slice(s![b * l..(b + 1) * l, ..])
    }

    /// A new unrecorded state over a subset of segments, keeping every
    /// cached depth so encoding can resume where it stopped.
    pub fn select(&self, segments: &[usize]) -> Self {
        let l = self.input.seq_len;
        let rows: Vec<usize> = segments
            .iter()
            .flat_map(|&b| b * l..(b + 1) * l)
            .collect();
        EncoderState {
            input: self.input.select(segments),
            hidden: self.hidden.iter().map(|h| h.select(Axis(0), &rows)).collect(),
            tapes: None,
            embed_drop: None,
            dropout: None,
            block_passes: 0,
        }
    }
}

impl<F: Real> ModelParams<F> {
    /// `h^0[i] = word[id_i] + type[t_i] + position[i]`.
    pub fn embed(&self, input: &EncoderInput) -> Result<Array2<F>> {
        let l = input.seq_len;
        if l > self.config.max_seq_len {
            return Err(Error::InvalidInput(format!(
                "sequence length {l} exceeds L_x = {}",
                self.config.max_seq_len
            )));
        }
        let mut h = Array2::<F>::zeros((input.input_ids.len(), self.config.hidden));
        for (i, mut row) in h.axis_iter_mut(Axis(0)).enumerate() {
            let id = input.input_ids[i] as usize;
            let ty = input.type_ids[i] as usize;
            if id >= self.config.vocab_size {
                return Err(Error::InvalidInput(format!(
                    "token id {id} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            if ty >= 2 {
                return Err(Error::InvalidInput(format!("type id {ty} outside [0, 2)")));
            }
            row.assign(&self.word.row(id));
            row += &self.token_type.row(ty);
            row += &self.position.row(i % l);
        }
        Ok(h)
    }

    /// Embeds the batch and returns a state at depth 0.
    pub fn start(&self, input: EncoderInput, mode: ForwardMode) -> Result<EncoderState<F>> {
        let mut h0 = self.embed(&input)?;
        let mut dropout = (mode.dropout > 0.0).then(|| Dropout {
            p: mode.dropout,
            rng: ChaCha8Rng::seed_from_u64(mode.seed),
        });
        let embed_drop = dropout.as_mut().and_then(|d| d.mask::<F>(h0.dim()));
        if let Some(m) = &embed_drop {
            h0 *= m;
        }
        Ok(EncoderState {
            input,
            hidden: vec![h0],
            tapes: mode.record.then(Vec::new),
            embed_drop,
            dropout,
            block_passes: 0,
        })
    }

    /// Applies blocks `depth+1 ..= target` and returns `h^target`.
    pub fn encode_until<'s>(&self, state: &'s mut EncoderState<F>, target: usize) -> Result<&'s Array2<F>> {
        let layers = self.blocks.len();
        if target > layers {
            return Err(Error::InvalidInput(format!(
                "cannot encode to block {target}: model has {layers}"
            )));
        }
        if target < state.depth() {
            return Err(Error::InvalidInput(format!(
                "state is already at block {}, cannot stop at {target}",
                state.depth()
            )));
        }
        let layout = Layout {
            seq_len: state.input.seq_len,
            valid_lens: &state.input.valid_lens,
            heads: self.config.heads,
        };
        let record = state.tapes.is_some();
        for i in state.depth()..target {
            let (h, tape) = block::forward(
                &self.blocks[i],
                state.hidden.last().expect("h^0"),
                &layout,
                state.dropout.as_mut(),
                record,
            );
            state.hidden.push(h);
            if let (Some(tapes), Some(t)) = (state.tapes.as_mut(), tape) {
                tapes.push(t);
            }
            state.block_passes += layout.valid_lens.len();
        }
        Ok(state.top())
    }

    /// Continues a suspended state through the remaining blocks to `I`.
    pub fn resume_encode<'s>(&self, state: &'s mut EncoderState<F>) -> Result<&'s Array2<F>> {
        self.encode_until(state, self.blocks.len())
    }

    /// Back-propagates `dL/dh^depth` through the recorded blocks and the
    /// embeddings, accumulating into `grads`. The tape is consumed.
    pub fn backward(&self, state: &mut EncoderState<F>, d_top: Array2<F>, grads: &mut ModelParams<F>) -> Result<()> {
        let tapes = state.tapes.take().ok_or(Error::NoForwardRecord)?;
        if d_top.dim() != state.top().dim() {
            return Err(Error::Shape {
                name: "d_top".into(),
                expected: state.top().shape().to_vec(),
                found: d_top.shape().to_vec(),
            });
        }
        let layout = Layout {
            seq_len: state.input.seq_len,
            valid_lens: &state.input.valid_lens,
            heads: self.config.heads,
        };
        let mut dh = d_top;
        for (i, tape) in tapes.iter().enumerate().rev() {
            dh = block::backward(&self.blocks[i], tape, &dh, &layout, &mut grads.blocks[i]);
        }
        if let Some(m) = &state.embed_drop {
            dh *= m;
        }
        let l = state.input.seq_len;
        for (i, row) in dh.axis_iter(Axis(0)).enumerate() {
            let id = state.input.input_ids[i] as usize;
            let ty = state.input.type_ids[i] as usize;
            grads.word.row_mut(id).scaled_add(F::one(), &row);
            grads.token_type.row_mut(ty).scaled_add(F::one(), &row);
            grads.position.row_mut(i % l).scaled_add(F::one(), &row);
        }
        Ok(())
    }
}

#[cfg(test)]
impl<F: Real> EncoderState<F> {
    pub(crate) fn attention_probs(&self, block: usize) -> &[Array2<F>] {
        &self.tapes.as_ref().expect("recorded")[block].probs
    }
}
