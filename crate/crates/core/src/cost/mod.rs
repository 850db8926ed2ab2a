//! Analytic cost model over a [`GraphSpec`].
//!
//! MACs are bucketed by `(activation bits, weight bits)`. From the buckets:
//!
//! - ACE: `Σ n_ij · i · j` (active bit-adders per MAC),
//! - CPU64: FLOPs + BOPs/64 extended with 1/8 for int8, 1/16 for int4 and 1/32 for int2,
//!
//! plus the parameter footprint and the elementwise (unquantized layer) cost
//! in [`elementwise`].

pub mod elementwise;
pub mod energy;
pub mod report;

use std::collections::BTreeMap;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphir::{infer_shapes, DType, GraphError, GraphSpec, NodeSpec, OpKind, Shape};

pub use elementwise::{count_elementwise, elementwise_ace, ElementwiseCount, FusionPolicy, OpCount};
pub use energy::{energy_correlation, EnergyMetric, EnergyRow, ProcessNode, RowSelection, ENERGY_TABLE};
pub use report::{render_elementwise, render_report, render_reports, ReportFormat};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CostError {
    #[error("graph cannot be shaped: {0}")]
    Unshaped(#[from] GraphError),
    #[error("node `{0}` carries no bitwidth pair")]
    MissingBits(String),
    #[error("elementwise model does not cover nodes: {}", .0.join(", "))]
    Unsupported(Vec<String>),
    #[error("energy correlation needs at least 3 rows, got {0}")]
    TooFewRows(usize),
    #[error("unknown energy row `{0}`")]
    UnknownRow(String),
}

/// MAC count for one `(activation, weight)` bitwidth pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacBucket {
    pub act_bits: DType,
    pub weight_bits: DType,
    pub count: u64,
}

/// MACs of a single node: `H_out·W_out·C_out·K_h·K_w·C_in/groups` for convs, `in·out` for dense.
pub fn node_macs(node: &NodeSpec, input: Shape, output: Shape) -> u64 {
    match node.op {
        OpKind::Conv2d | OpKind::DepthwiseConv2d => {
            let [kh, kw] = node.attrs.kernel();
            let groups = node.attrs.groups() as u64;
            let [ho, wo, co] = output.map(|v| v as u64);
            ho * wo * co * kh as u64 * kw as u64 * (input[2] as u64 / groups)
        }
        OpKind::Dense => (input[2] * output[2]) as u64,
        _ => 0,
    }
}

/// MACs of every MAC-bearing node, keyed by node id, in graph order.
pub fn per_node_macs(g: &GraphSpec) -> Result<Vec<(String, DType, DType, u64)>, CostError> {
    let shapes = infer_shapes(g)?;
    let mut out = Vec::new();
    for node in g.nodes.iter().filter(|n| n.op.is_mac()) {
        let (Some(a), Some(w)) = (node.attrs.act_bits, node.attrs.weight_bits) else {
            return Err(CostError::MissingBits(node.id.clone()));
        };
        let macs = node_macs(node, shapes[&node.inputs[0]], shapes[&node.id]);
        out.push((node.id.clone(), a, w, macs));
    }
    Ok(out)
}

/// Buckets ordered widest first (fp32 before binary).
pub fn count_macs(g: &GraphSpec) -> Result<Vec<MacBucket>, CostError> {
    let mut map: BTreeMap<(DType, DType), u64> = BTreeMap::new();
    for (_, a, w, macs) in per_node_macs(g)? {
        *map.entry((a, w)).or_default() += macs;
    }
    Ok(map
        .into_iter()
        .map(|((act_bits, weight_bits), count)| MacBucket {
            act_bits,
            weight_bits,
            count,
        })
        .collect())
}

/// Total MACs whose pair matches `act` and `weight`.
pub fn bucket_count(buckets: &[MacBucket], act: DType, weight: DType) -> u64 {
    buckets
        .iter()
        .filter(|b| b.act_bits == act && b.weight_bits == weight)
        .map(|b| b.count)
        .sum()
}

/// Reporting conventions for ACE.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AceOptions {
    /// Treat fp32 MACs as bf16, the convention used when comparing prior work.
    pub fp32_as_bf16: bool,
}

fn ace_bits(d: DType, opts: AceOptions) -> u64 {
    if opts.fp32_as_bf16 && d == DType::Fp32 {
        16
    } else {
        d.bits() as u64
    }
}

pub fn ace(buckets: &[MacBucket]) -> u64 {
    ace_with(buckets, AceOptions::default())
}

pub fn ace_with(buckets: &[MacBucket], opts: AceOptions) -> u64 {
    buckets
        .iter()
        .map(|b| b.count * ace_bits(b.act_bits, opts) * ace_bits(b.weight_bits, opts))
        .sum()
}

/// CPU64 coefficient of a format: 1 for floats, `bits/64` for integers and binary.
pub fn cpu64_coefficient(d: DType) -> Ratio<u64> {
    if d.is_float() {
        Ratio::from_integer(1)
    } else {
        Ratio::new(d.bits() as u64, 64)
    }
}

/// Mixed pairs are charged at the wider operand.
pub fn cpu64(buckets: &[MacBucket]) -> Ratio<u64> {
    buckets.iter().fold(Ratio::from_integer(0), |acc, b| {
        let wide = if b.act_bits.bits() >= b.weight_bits.bits() {
            b.act_bits
        } else {
            b.weight_bits
        };
        acc + cpu64_coefficient(wide) * Ratio::from_integer(b.count)
    })
}

/// How parameters without a quantized format are stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeConfig {
    /// Bits per BatchNorm, DPReLU and bias parameter.
    pub non_weight_bits: u32,
}

impl Default for SizeConfig {
    fn default() -> Self {
        SizeConfig { non_weight_bits: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamInventory {
    pub weight_bits_total: u64,
    pub weight_params: u64,
    pub non_weight_params: u64,
}

pub fn param_inventory(g: &GraphSpec) -> Result<ParamInventory, CostError> {
    let shapes = infer_shapes(g)?;
    let mut inv = ParamInventory::default();
    for node in &g.nodes {
        let out = shapes[&node.id];
        match node.op {
            OpKind::Conv2d | OpKind::DepthwiseConv2d | OpKind::Dense => {
                let input = shapes[&node.inputs[0]];
                let wbits = node.attrs.weight_bits.ok_or_else(|| CostError::MissingBits(node.id.clone()))?;
                let n = if node.op == OpKind::Dense {
                    (input[2] * out[2]) as u64
                } else {
                    let [kh, kw] = node.attrs.kernel();
                    (kh * kw * input[2] / node.attrs.groups() * out[2]) as u64
                };
                inv.weight_params += n;
                inv.weight_bits_total += n * wbits.bits() as u64;
                if node.op == OpKind::Dense {
                    inv.non_weight_params += out[2] as u64;
                }
            }
            OpKind::Batchnorm => inv.non_weight_params += 2 * out[2] as u64,
            OpKind::Dprelu => inv.non_weight_params += 4 * out[2] as u64,
            _ => {}
        }
    }
    Ok(inv)
}

/// Parameter footprint in bytes (rounded up).
pub fn model_size(g: &GraphSpec, cfg: SizeConfig) -> Result<u64, CostError> {
    let inv = param_inventory(g)?;
    let bits = inv.weight_bits_total + inv.non_weight_params * cfg.non_weight_bits as u64;
    Ok(bits.div_ceil(8))
}

pub const MIB: f64 = 1024.0 * 1024.0;

/// Everything the analyzer reports for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub buckets: Vec<MacBucket>,
    pub ace: u64,
    pub ace_options: AceOptions,
    pub cpu64: Ratio<u64>,
    pub size_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elementwise: Option<ElementwiseCount>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elementwise_ace: Option<u64>,
}

impl CostReport {
    pub fn size_mib(&self) -> f64 {
        self.size_bytes as f64 / MIB
    }

    pub fn cpu64_f64(&self) -> f64 {
        *self.cpu64.numer() as f64 / *self.cpu64.denom() as f64
    }

    /// MACs whose wider operand has format `d`.
    pub fn macs_by_widest(&self, d: DType) -> u64 {
        self.buckets
            .iter()
            .filter(|b| {
                let wide = if b.act_bits.bits() >= b.weight_bits.bits() {
                    b.act_bits
                } else {
                    b.weight_bits
                };
                wide == d
            })
            .map(|b| b.count)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AnalyzeOptions {
    pub ace: AceOptions,
    pub size: SizeConfig,
    /// Also compute the elementwise breakdown and its ACE under this policy.
    pub elementwise: Option<FusionPolicy>,
}

pub fn analyze(g: &GraphSpec, opts: AnalyzeOptions) -> Result<CostReport, CostError> {
    let buckets = count_macs(g)?;
    let (elementwise, elementwise_ace) = match opts.elementwise {
        Some(policy) => {
            let c = count_elementwise(g)?;
            let a = elementwise_ace(&c, policy);
            (Some(c), Some(a))
        }
        None => (None, None),
    };
    Ok(CostReport {
        model: g.name.clone(),
        ace: ace_with(&buckets, opts.ace),
        ace_options: opts.ace,
        cpu64: cpu64(&buckets),
        size_bytes: model_size(g, opts.size)?,
        buckets,
        elementwise,
        elementwise_ace,
    })
}
