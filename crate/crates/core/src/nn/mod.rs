//! Differentiable reference executor.
//!
//! - [`Tape`]: reverse-mode autodiff over the primitive op set, in `f64`.
//! - [`blocks`]: DPReLU, SE_4b, ReshapeAdd, PokeConv and PokeInit on the tape.
//! - [`Model`]: parameters and state for a [`GraphSpec`](crate::graphir::GraphSpec),
//!   with two-phase quantization.
//! - [`checkpoint`]: named-tensor files.
//! - [`gradcheck`]: finite-difference suites.

pub mod blocks;
pub mod checkpoint;
pub mod gradcheck;
mod model;
pub mod quantize;
mod tape;
mod tensor;

use thiserror::Error;

use crate::quant::QuantError;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{ForwardOptions, ForwardPass, Mode, Model, ModelConfig, Phase};
pub use quantize::{Bounds, QuantForm};
pub use tape::{avg_channel_window, BatchStats, BnMode, Grads, Tape, Var, BN_EPSILON};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{what}: expected {expected} channels, found {found}")]
    ChannelMismatch { what: String, expected: usize, found: usize },
    #[error("channel ratio {from} -> {to} is not integral")]
    Ratio { from: usize, to: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("phase error: {0}")]
    Phase(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
}
