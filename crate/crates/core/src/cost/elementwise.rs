//! Arithmetic in the layers that are not MACs: BatchNorm, DPReLU, the
//! ReshapeAdd pieces, residual additions, SE bookkeeping and the global pool.
//!
//! Counting rules (per output element unless noted):
//!
//! | op | adds | muls |
//! |---|---|---|
//! | batchnorm | 1 | 1 |
//! | dprelu | 3 | 1 |
//! | avg_channels | input elements | 1 |
//! | avg_pool `k×k` | `k²` | 1 |
//! | add | 1 | 0 |
//! | spatial_mean | input elements | 1 per channel |
//! | hardsigmoid | 1 | 1 |
//! | multiply | 0 | 1 |
//!
//! `relu`, `pad_channels`, `tile_channels`, `quantize_act` carry no
//! arithmetic. A residual add is local when its main operand comes straight
//! from a BatchNorm and block-level when it comes from another add.
//! A `spatial_mean` feeding the classifier is the global pool; any other is
//! the SE squeeze. `max_pool` and any `relu` not following a dense layer are
//! outside the model and make counting fail.

use serde::{Deserialize, Serialize};

use super::CostError;
use crate::graphir::{infer_shapes, GraphSpec, OpKind};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub adds: u64,
    pub muls: u64,
}

impl OpCount {
    fn bump(&mut self, adds: u64, muls: u64) {
        self.adds += adds;
        self.muls += muls;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementwiseCount {
    pub batchnorm: OpCount,
    pub dprelu: OpCount,
    pub avg_channels: OpCount,
    pub avg_pool: OpCount,
    pub residual_local: OpCount,
    pub residual_block: OpCount,
    pub se_spatial_mean: OpCount,
    pub se_activations: OpCount,
    pub se_gate: OpCount,
    pub global_pool: OpCount,
}

impl ElementwiseCount {
    pub fn parts(&self) -> [(&'static str, OpCount); 10] {
        [
            ("batchnorm", self.batchnorm),
            ("dprelu", self.dprelu),
            ("avg_channels", self.avg_channels),
            ("avg_pool", self.avg_pool),
            ("residual_local", self.residual_local),
            ("residual_block", self.residual_block),
            ("se_spatial_mean", self.se_spatial_mean),
            ("se_activations", self.se_activations),
            ("se_gate", self.se_gate),
            ("global_pool", self.global_pool),
        ]
    }

    pub fn adds(&self) -> u64 {
        self.parts().iter().map(|(_, c)| c.adds).sum()
    }

    pub fn muls(&self) -> u64 {
        self.parts().iter().map(|(_, c)| c.muls).sum()
    }
}

pub fn count_elementwise(g: &GraphSpec) -> Result<ElementwiseCount, CostError> {
    let shapes = infer_shapes(g)?;
    let elems = |id: &str| shapes[id].iter().product::<usize>() as u64;
    let op_of = |id: &str| g.node(id).map(|n| n.op);
    let mut c = ElementwiseCount::default();
    let mut unsupported = Vec::new();
    for node in &g.nodes {
        let n = elems(&node.id);
        match node.op {
            OpKind::Batchnorm => c.batchnorm.bump(n, n),
            OpKind::Dprelu => c.dprelu.bump(3 * n, n),
            OpKind::AvgChannels => c.avg_channels.bump(elems(&node.inputs[0]), n),
            OpKind::AvgPool => {
                let [kh, kw] = node.attrs.kernel();
                c.avg_pool.bump((kh * kw) as u64 * n, n)
            }
            OpKind::Add => match op_of(&node.inputs[0]) {
                Some(OpKind::Add) => c.residual_block.bump(n, 0),
                _ => c.residual_local.bump(n, 0),
            },
            OpKind::SpatialMean => {
                let to_classifier = g.consumers(&node.id).iter().any(|d| {
                    d.op == OpKind::Dense && g.consumers(&d.id).iter().any(|o| o.op == OpKind::Output)
                });
                let part = if to_classifier {
                    &mut c.global_pool
                } else {
                    &mut c.se_spatial_mean
                };
                part.bump(elems(&node.inputs[0]), shapes[&node.id][2] as u64);
            }
            OpKind::Hardsigmoid => c.se_activations.bump(n, n),
            OpKind::Relu if op_of(&node.inputs[0]) == Some(OpKind::Dense) => {}
            OpKind::Multiply => c.se_gate.bump(0, n),
            OpKind::Relu | OpKind::MaxPool => unsupported.push(node.id.clone()),
            _ => {}
        }
    }
    if unsupported.is_empty() {
        Ok(c)
    } else {
        Err(CostError::Unsupported(unsupported))
    }
}

/// Bitwidth assumptions for the elementwise layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionPolicy {
    /// Every add and multiply in bf16 (16×16 bit-adders).
    Bf16Unfused,
    /// 16-bit fixed-point adds, 16×8 multiplies; divisions by constants
    /// (pool, channel average, mean, hardsigmoid) are shifts and cost nothing.
    FixedPointUnfused,
    /// As above, with DPReLU scaling folded into the adjacent layers and the
    /// SE gate folded into the following BatchNorm; only BatchNorm multiplies remain.
    FixedPointFused,
}

const BF16_OP: u64 = 16 * 16;
const FIXED_ADD: u64 = 16;
const FIXED_MUL: u64 = 16 * 8;

pub fn elementwise_ace(c: &ElementwiseCount, policy: FusionPolicy) -> u64 {
    match policy {
        FusionPolicy::Bf16Unfused => (c.adds() + c.muls()) * BF16_OP,
        FusionPolicy::FixedPointUnfused => {
            c.adds() * FIXED_ADD + (c.batchnorm.muls + c.dprelu.muls + c.se_gate.muls) * FIXED_MUL
        }
        FusionPolicy::FixedPointFused => c.adds() * FIXED_ADD + c.batchnorm.muls * FIXED_MUL,
    }
}
