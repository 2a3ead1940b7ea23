//! Shared transformer encoder with suspend/resume at any block.

mod block;
pub mod gradcheck;
pub(crate) mod ops;
mod params;
mod state;

pub use gradcheck::{gradient_check, GradCheckReport, TensorCheck};
pub use params::{BlockParams, HeadParams, ModelConfig, ModelParams, Parameters, TensorRef};
pub use state::{EncoderInput, EncoderState, ForwardMode};
