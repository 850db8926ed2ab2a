//! JSON graph schema (version 1).
//!
//! ```json
//! {"name": "...", "version": 1, "input_shape": [H, W, C], "channel_multiplier": "7/5",
//!  "nodes": [{"id": "...", "op": "conv2d", "inputs": ["..."], "attrs": {...}}]}
//! ```
//!
//! Bitwidths are the strings `fp32 bf16 int8 int4 int2 bin`; `divisor` is a
//! rational string such as `"9"`. `channel_multiplier` is optional and defaults
//! to 1. Unknown keys are rejected at every level.

use std::fs;
use std::path::Path;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Attrs, GraphSpec, NodeSpec, OpKind, Shape};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GraphIoError {
    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error("node `{node}`: unknown op `{op}`")]
    UnknownOp { node: String, op: String },
    #[error("unsupported schema version {found} (expected {SCHEMA_VERSION})")]
    Version { found: u32 },
    #[error("invalid channel multiplier `{0}`")]
    Multiplier(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for GraphIoError {
    fn from(e: serde_json::Error) -> Self {
        GraphIoError::Parse {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    name: String,
    version: u32,
    input_shape: Shape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    channel_multiplier: Option<String>,
    nodes: Vec<RawNode>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: String,
    op: String,
    inputs: Vec<String>,
    #[serde(default)]
    attrs: Attrs,
}

pub fn graph_to_json(g: &GraphSpec) -> String {
    let raw = RawGraph {
        name: g.name.clone(),
        version: SCHEMA_VERSION,
        input_shape: g.input_shape,
        channel_multiplier: Some(g.channel_multiplier.to_string()),
        nodes: g
            .nodes
            .iter()
            .map(|n| RawNode {
                id: n.id.clone(),
                op: n.op.name().to_string(),
                inputs: n.inputs.clone(),
                attrs: n.attrs.clone(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&raw).expect("graph serialization cannot fail")
}

pub fn graph_from_json(text: &str) -> Result<GraphSpec, GraphIoError> {
    let raw: RawGraph = serde_json::from_str(text)?;
    if raw.version != SCHEMA_VERSION {
        return Err(GraphIoError::Version { found: raw.version });
    }
    let channel_multiplier = match raw.channel_multiplier {
        None => Ratio::from_integer(1),
        Some(s) => s.parse::<Ratio<i64>>().map_err(|_| GraphIoError::Multiplier(s.clone()))?,
    };
    let nodes = raw
        .nodes
        .into_iter()
        .map(|n| {
            let op = OpKind::from_name(&n.op).ok_or_else(|| GraphIoError::UnknownOp {
                node: n.id.clone(),
                op: n.op.clone(),
            })?;
            Ok(NodeSpec {
                id: n.id,
                op,
                attrs: n.attrs,
                inputs: n.inputs,
            })
        })
        .collect::<Result<Vec<_>, GraphIoError>>()?;
    Ok(GraphSpec {
        name: raw.name,
        input_shape: raw.input_shape,
        channel_multiplier,
        nodes,
    })
}

pub fn save_graph(g: &GraphSpec, path: impl AsRef<Path>) -> Result<(), GraphIoError> {
    fs::write(path, graph_to_json(g))?;
    Ok(())
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<GraphSpec, GraphIoError> {
    graph_from_json(&fs::read_to_string(path)?)
}

pub(super) mod ratio_opt {
    use num_rational::Ratio;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Ratio<i64>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(r) => s.serialize_str(&r.to_string()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Ratio<i64>>, D::Error> {
        let s = Option::<String>::deserialize(d)?;
        s.map(|s| {
            s.parse::<Ratio<i64>>()
                .map_err(|_| serde::de::Error::custom(format!("invalid rational `{s}`")))
        })
        .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphir::builtin;

    #[test]
    fn round_trip_toy() {
        let g = builtin("pokebnn-toy").unwrap();
        let back = graph_from_json(&graph_to_json(&g)).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn truncated_input_reports_position() {
        let text = graph_to_json(&builtin("pokebnn-toy").unwrap());
        let cut = &text[..text.len() / 2];
        match graph_from_json(cut) {
            Err(GraphIoError::Parse { line, .. }) => assert!(line > 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_op_is_named() {
        let text = r#"{"name":"x","version":1,"input_shape":[4,4,1],
            "nodes":[{"id":"in","op":"input","inputs":[]},{"id":"c","op":"conv5d","inputs":["in"]}]}"#;
        let e = graph_from_json(text).unwrap_err();
        assert!(matches!(&e, GraphIoError::UnknownOp { op, .. } if op == "conv5d"));
        assert!(e.to_string().contains("conv5d"));
    }

    #[test]
    fn version_and_unknown_keys_rejected() {
        let v2 = r#"{"name":"x","version":2,"input_shape":[4,4,1],"nodes":[]}"#;
        assert!(matches!(graph_from_json(v2), Err(GraphIoError::Version { found: 2 })));
        let extra = r#"{"name":"x","version":1,"input_shape":[4,4,1],"nodes":[],"colour":"red"}"#;
        assert!(matches!(graph_from_json(extra), Err(GraphIoError::Parse { .. })));
        let extra_attr = r#"{"name":"x","version":1,"input_shape":[4,4,1],
            "nodes":[{"id":"in","op":"input","inputs":[],"attrs":{"dilation":2}}]}"#;
        assert!(matches!(graph_from_json(extra_attr), Err(GraphIoError::Parse { .. })));
        let bad_bits = r#"{"name":"x","version":1,"input_shape":[4,4,1],
            "nodes":[{"id":"in","op":"input","inputs":[],"attrs":{"act_bits":"int3"}}]}"#;
        assert!(matches!(graph_from_json(bad_bits), Err(GraphIoError::Parse { .. })));
    }

    #[test]
    fn bitwidths_serialize_as_tags() {
        let text = graph_to_json(&builtin("pokebnn-toy").unwrap());
        assert!(text.contains("\"bin\""));
        assert!(text.contains("\"int8\""));
        assert!(text.contains("\"int4\""));
        assert!(text.contains("\"divisor\": \"9\""));
    }
}
