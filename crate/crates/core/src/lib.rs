//! Hyena operator as a drop-in replacement for attention in a small
//! GPT-NeoX-style decoder, plus the tooling to distill an attention teacher
//! into a Hyena student at desk scale.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors and a tape-based reverse-mode autodiff engine.
//! - [`sigproc`]: FFT, causal convolutions and the state-space recurrence /
//!   impulse-response duality.
//! - [`mixers`]: multi-head causal self-attention with rotary embeddings and
//!   the Hyena operator.
//! - [`model`]: the parallel-residual decoder stack and its checkpoint format.
//! - [`data`]: byte tokenizer, window sampling and activation datasets.
//! - [`training`]: losses, LR schedule, AdamW and the stage drivers
//!   (pretrain, progressive / joint knowledge transfer, CE fine-tune).
//! - [`evalbench`]: perplexity, scaling benchmarks and comparison reports.
//! - [`cli`]: the `hyena-distill` command line.

pub mod cli;
mod container;
pub mod data;
pub mod error;
pub mod evalbench;
pub mod mixers;
pub mod model;
pub mod params;
pub mod sigproc;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Init, Precision, Scalar, Tensor, Var};
