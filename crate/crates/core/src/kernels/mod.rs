//! Compute kernels.
//!
//! - [`bitplane`]: packed sign tensors, XNOR/popcount dot and binary convolution.
//! - [`int`]: int8/int4 convolution and dense layers with 32-bit accumulators.
//! - [`emulate`]: higher-precision matmul built from AND-popcount bit-plane products.
//! - [`reference`]: double-precision oracles with loop-trip counters.
//! - [`verify`]: randomized equivalence suites over the above.
//!
//! Weights are HWIO (`[kh, kw, in/groups, out]`), activations HWC.

pub mod bitplane;
pub mod emulate;
pub mod int;
pub mod reference;
pub mod verify;

use thiserror::Error;

use crate::graphir::{DType, Padding};

pub use bitplane::{binary_conv2d, pack_signs, xnor_popcount_dot, BinaryFilters, BitPlane};
pub use emulate::{bitplane_matmul, direct_matmul, Emulation};
pub use int::{int_conv2d, int_dense, IntTensor, Scale};
pub use reference::{avg_pool_ref, float_conv2d, float_dense, RefOutput};
pub use verify::{verify_kernels, FaultInjection, SuiteResult, VerifyReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("element {index} is {value}, expected -1 or +1")]
    NotSign { index: usize, value: f64 },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("32-bit accumulator overflow at output {index}")]
    Overflow { index: usize },
    #[error("bit-plane emulation needs unsigned operands; found {value} at {index}")]
    SignedInput { index: usize, value: i32 },
    #[error("bit-plane emulation needs unsigned operands; tensor is signed")]
    SignedTensor,
    #[error("unsupported bitwidth {0}")]
    Bits(DType),
    #[error("value {value} at {index} exceeds the {bits}-bit range")]
    Range { index: usize, value: i32, bits: DType },
}

/// Stride, padding and channel grouping of a convolution or pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: Padding,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: Padding) -> Self {
        ConvGeometry {
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Output size and leading padding of a windowed op.
pub fn conv_out_dims(
    input: [usize; 2],
    kernel: [usize; 2],
    geom: ConvGeometry,
) -> Result<(usize, usize, [usize; 2]), KernelError> {
    if geom.stride == 0 {
        return Err(KernelError::Shape("stride must be positive".into()));
    }
    let ho = geom.padding.output_size(input[0], kernel[0], geom.stride);
    let wo = geom.padding.output_size(input[1], kernel[1], geom.stride);
    match (ho, wo) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok((
            ho,
            wo,
            [
                geom.padding.pad_before(input[0], kernel[0], geom.stride),
                geom.padding.pad_before(input[1], kernel[1], geom.stride),
            ],
        )),
        _ => Err(KernelError::Shape(format!("kernel {kernel:?} does not fit input {input:?}"))),
    }
}

/// Raw 32-bit accumulator output with a per-output-channel dequantization scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulator {
    pub shape: Vec<usize>,
    pub values: Vec<i32>,
    pub scale: Vec<f64>,
}

impl Accumulator {
    pub fn dequantize(&self) -> Vec<f64> {
        let c = self.scale.len();
        self.values
            .iter()
            .enumerate()
            .map(|(i, &v)| v as f64 * self.scale[i % c])
            .collect()
    }
}
