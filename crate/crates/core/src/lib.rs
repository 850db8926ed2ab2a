//! Building blocks for binary and mixed-precision convolutional networks.
//!
//! - [`graphir`]: static network IR, shape inference, JSON schema, builtin models.
//! - [`quant`]: fake-quantization and binarization with straight-through gradients.
//! - [`kernels`]: bit-packed XNOR/popcount and integer kernels plus float oracles.
//! - [`nn`]: reverse-mode reference executor and the composite blocks.
//! - [`cost`]: MAC buckets, ACE, CPU64, model size and elementwise cost.
//! - [`train`]: desk-scale two-phase trainer.
//! - [`cli`]: the `pokebnn` command-line surface.

pub mod graphir;
pub mod quant;
pub mod kernels;
pub mod nn;
pub mod cost;
pub mod train;
pub mod cli;
