//! Static network IR.
//!
//! A [`GraphSpec`] is an ordered list of primitive nodes. Composite blocks
//! (PokeConv, PokeInit, SE, ReshapeAdd) are expanded by the builders into
//! primitive subgraphs, so every consumer (shape inference, the cost analyzer,
//! the reference executor) only deals with the op set in [`OpKind`].
//!
//! Shapes are `[H, W, C]`; there is no batch dimension in the IR.

mod builders;
mod json;
mod shapes;

use std::collections::HashSet;
use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use builders::{
    build_pokebnn, build_pokebnn_toy, build_pokebnn_toy_with_classes, build_resnet50, builtin, builtin_names,
    parse_multiplier, pokebnn_stage_channels,
    toy_group_stages, GraphBuilder, ResidualMode,
};
pub use json::{graph_from_json, graph_to_json, load_graph, save_graph, GraphIoError, SCHEMA_VERSION};
pub use shapes::{infer_node_shape, infer_shapes, ShapeMap};

/// Spatial + channel shape of a node output.
pub type Shape = [usize; 3];

/// Numeric formats that appear in MAC buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    Fp32,
    Bf16,
    Int8,
    Int4,
    Int2,
    Binary,
}

impl DType {
    pub const ALL: [DType; 6] = [
        DType::Fp32,
        DType::Bf16,
        DType::Int8,
        DType::Int4,
        DType::Int2,
        DType::Binary,
    ];

    pub fn bits(self) -> u32 {
        match self {
            DType::Fp32 => 32,
            DType::Bf16 => 16,
            DType::Int8 => 8,
            DType::Int4 => 4,
            DType::Int2 => 2,
            DType::Binary => 1,
        }
    }

    pub fn from_bits(bits: u32) -> Option<DType> {
        DType::ALL.into_iter().find(|d| d.bits() == bits)
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::Fp32 | DType::Bf16)
    }

    /// Serialized tag used by the JSON schema.
    pub fn tag(self) -> &'static str {
        match self {
            DType::Fp32 => "fp32",
            DType::Bf16 => "bf16",
            DType::Int8 => "int8",
            DType::Int4 => "int4",
            DType::Int2 => "int2",
            DType::Binary => "bin",
        }
    }

    pub fn from_tag(tag: &str) -> Option<DType> {
        DType::ALL.into_iter().find(|d| d.tag() == tag)
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl Serialize for DType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.tag())
    }
}

impl<'de> Deserialize<'de> for DType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let tag = String::deserialize(d)?;
        DType::from_tag(&tag).ok_or_else(|| serde::de::Error::custom(format!("unknown dtype `{tag}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Conv2d,
    DepthwiseConv2d,
    Dense,
    Batchnorm,
    Dprelu,
    Relu,
    Hardsigmoid,
    Add,
    PadChannels,
    TileChannels,
    AvgChannels,
    AvgPool,
    MaxPool,
    SpatialMean,
    Multiply,
    QuantizeAct,
    Input,
    Output,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::Conv2d,
        OpKind::DepthwiseConv2d,
        OpKind::Dense,
        OpKind::Batchnorm,
        OpKind::Dprelu,
        OpKind::Relu,
        OpKind::Hardsigmoid,
        OpKind::Add,
        OpKind::PadChannels,
        OpKind::TileChannels,
        OpKind::AvgChannels,
        OpKind::AvgPool,
        OpKind::MaxPool,
        OpKind::SpatialMean,
        OpKind::Multiply,
        OpKind::QuantizeAct,
        OpKind::Input,
        OpKind::Output,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::DepthwiseConv2d => "depthwise_conv2d",
            OpKind::Dense => "dense",
            OpKind::Batchnorm => "batchnorm",
            OpKind::Dprelu => "dprelu",
            OpKind::Relu => "relu",
            OpKind::Hardsigmoid => "hardsigmoid",
            OpKind::Add => "add",
            OpKind::PadChannels => "pad_channels",
            OpKind::TileChannels => "tile_channels",
            OpKind::AvgChannels => "avg_channels",
            OpKind::AvgPool => "avg_pool",
            OpKind::MaxPool => "max_pool",
            OpKind::SpatialMean => "spatial_mean",
            OpKind::Multiply => "multiply",
            OpKind::QuantizeAct => "quantize_act",
            OpKind::Input => "input",
            OpKind::Output => "output",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|o| o.name() == name)
    }

    /// Ops that perform multiply-accumulates and therefore carry a bitwidth pair.
    pub fn is_mac(self) -> bool {
        matches!(self, OpKind::Conv2d | OpKind::DepthwiseConv2d | OpKind::Dense)
    }

    pub fn arity(self) -> usize {
        match self {
            OpKind::Input => 0,
            OpKind::Add | OpKind::Multiply => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

impl Padding {
    pub fn output_size(self, input: usize, kernel: usize, stride: usize) -> Option<usize> {
        match self {
            Padding::Same => Some(input.div_ceil(stride)),
            Padding::Valid => (input >= kernel).then(|| (input - kernel) / stride + 1),
        }
    }

    /// Leading (top/left) zero padding for SAME, TF convention.
    pub fn pad_before(self, input: usize, kernel: usize, stride: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => {
                let out = input.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(input);
                total / 2
            }
        }
    }
}

/// Per-node attributes. Which keys are required depends on the op.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attrs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<Padding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act_bits: Option<DType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_bits: Option<DType>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "json::ratio_opt"
    )]
    pub divisor: Option<Ratio<i64>>,
}

impl Attrs {
    pub fn kernel(&self) -> [usize; 2] {
        self.kernel.unwrap_or([1, 1])
    }
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(1)
    }
    pub fn padding(&self) -> Padding {
        self.padding.unwrap_or(Padding::Same)
    }
    pub fn groups(&self) -> usize {
        self.groups.unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub id: String,
    pub op: OpKind,
    pub attrs: Attrs,
    pub inputs: Vec<String>,
}

impl NodeSpec {
    pub fn new(id: impl Into<String>, op: OpKind, inputs: &[&str], attrs: Attrs) -> Self {
        NodeSpec {
            id: id.into(),
            op,
            attrs,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphSpec {
    pub name: String,
    pub input_shape: Shape,
    pub channel_multiplier: Ratio<i64>,
    pub nodes: Vec<NodeSpec>,
}

impl GraphSpec {
    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Ids of nodes that consume `id`.
    pub fn consumers(&self, id: &str) -> Vec<&NodeSpec> {
        self.nodes
            .iter()
            .filter(|n| n.inputs.iter().any(|i| i == id))
            .collect()
    }

    pub fn count_op(&self, op: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op == op).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("node `{node}`: unresolved input `{input}`")]
    UnresolvedInput { node: String, input: String },
    #[error("node `{node}`: {msg}")]
    Shape { node: String, msg: String },
    #[error("node `{node}`: inconsistent add shapes {lhs:?} vs {rhs:?}")]
    AddMismatch { node: String, lhs: Shape, rhs: Shape },
    #[error("invalid channel multiplier {0}: {1}")]
    ChannelMultiplier(String, String),
    #[error("shape underflow at `{node}`: spatial size {size} cannot be halved again")]
    Underflow { node: String, size: usize },
    #[error("invalid builder argument: {0}")]
    Argument(String),
}

/// A single validation finding, tied to the node it concerns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub node: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.node, self.message)
    }
}

/// Checks every node and graph invariant. Returns an empty list iff the graph is valid.
pub fn validate_graph(g: &GraphSpec) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut seen: HashSet<&str> = HashSet::new();
    let mut diag = |node: &str, message: String| {
        diags.push(Diagnostic {
            node: node.to_string(),
            message,
        })
    };

    for n in &g.nodes {
        if !seen.insert(n.id.as_str()) {
            diag(&n.id, "duplicate node id".into());
        }
        if n.inputs.len() != n.op.arity() {
            diag(
                &n.id,
                format!("{} expects {} input(s), got {}", n.op, n.op.arity(), n.inputs.len()),
            );
        }
        for input in &n.inputs {
            // Inputs must be defined earlier in the list; this also rules out cycles.
            if !seen.contains(input.as_str()) || input == &n.id {
                diag(&n.id, format!("unresolved input `{input}`"));
            }
        }
        if n.op.is_mac() && (n.attrs.act_bits.is_none() || n.attrs.weight_bits.is_none()) {
            diag(&n.id, "quantized node must carry both act_bits and weight_bits".into());
        }
        if let Some(groups) = n.attrs.groups {
            if groups == 0 {
                diag(&n.id, "groups must be positive".into());
            } else if let Some(out) = n.attrs.out_channels {
                if out % groups != 0 {
                    diag(&n.id, format!("groups={groups} does not divide out_channels={out}"));
                }
            }
        }
    }
    let inputs = g.count_op(OpKind::Input);
    let outputs = g.count_op(OpKind::Output);
    if inputs != 1 {
        diag(&g.name, format!("expected exactly one input node, found {inputs}"));
    }
    if outputs != 1 {
        diag(&g.name, format!("expected exactly one output node, found {outputs}"));
    }
    if diags.is_empty() {
        if let Err(e) = infer_shapes(g) {
            let node = match &e {
                GraphError::UnresolvedInput { node, .. }
                | GraphError::Shape { node, .. }
                | GraphError::AddMismatch { node, .. }
                | GraphError::Underflow { node, .. } => node.clone(),
                _ => g.name.clone(),
            };
            diags.push(Diagnostic {
                node,
                message: e.to_string(),
            });
        }
    }
    diags
}
