use std::collections::BTreeMap;

use super::{GraphError, GraphSpec, NodeSpec, OpKind, Shape};

/// Output shape of every node, keyed by node id.
pub type ShapeMap = BTreeMap<String, Shape>;

pub fn infer_shapes(g: &GraphSpec) -> Result<ShapeMap, GraphError> {
    let mut shapes = ShapeMap::new();
    for node in &g.nodes {
        let mut ins = Vec::with_capacity(node.inputs.len());
        for input in &node.inputs {
            match shapes.get(input) {
                Some(s) => ins.push(*s),
                None => {
                    return Err(GraphError::UnresolvedInput {
                        node: node.id.clone(),
                        input: input.clone(),
                    })
                }
            }
        }
        let shape = infer_node_shape(node, &ins, g.input_shape)?;
        shapes.insert(node.id.clone(), shape);
    }
    Ok(shapes)
}

fn err(node: &NodeSpec, msg: impl Into<String>) -> GraphError {
    GraphError::Shape {
        node: node.id.clone(),
        msg: msg.into(),
    }
}

fn out_channels(node: &NodeSpec) -> Result<usize, GraphError> {
    match node.attrs.out_channels {
        Some(0) => Err(err(node, "out_channels must be positive")),
        Some(c) => Ok(c),
        None => Err(err(node, "missing out_channels")),
    }
}

fn spatial(node: &NodeSpec, input: Shape) -> Result<(usize, usize), GraphError> {
    let [kh, kw] = node.attrs.kernel();
    let stride = node.attrs.stride();
    if stride == 0 || kh == 0 || kw == 0 {
        return Err(err(node, "kernel and stride must be positive"));
    }
    let pad = node.attrs.padding();
    let h = pad.output_size(input[0], kh, stride);
    let w = pad.output_size(input[1], kw, stride);
    match (h, w) {
        (Some(h), Some(w)) if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(err(node, format!("kernel {kh}x{kw} does not fit input {input:?}"))),
    }
}

/// Shape rule for a single node given its input shapes.
pub fn infer_node_shape(node: &NodeSpec, ins: &[Shape], input_shape: Shape) -> Result<Shape, GraphError> {
    if ins.len() != node.op.arity() {
        return Err(err(
            node,
            format!("{} expects {} input(s), got {}", node.op, node.op.arity(), ins.len()),
        ));
    }
    let shape = match node.op {
        OpKind::Input => input_shape,
        OpKind::Output
        | OpKind::Batchnorm
        | OpKind::Dprelu
        | OpKind::Relu
        | OpKind::Hardsigmoid
        | OpKind::QuantizeAct => ins[0],
        OpKind::Conv2d => {
            let cin = ins[0][2];
            let cout = out_channels(node)?;
            let groups = node.attrs.groups();
            if groups == 0 || cin % groups != 0 || cout % groups != 0 {
                return Err(err(
                    node,
                    format!("groups={groups} must divide in={cin} and out={cout} channels"),
                ));
            }
            let (h, w) = spatial(node, ins[0])?;
            [h, w, cout]
        }
        OpKind::DepthwiseConv2d => {
            let cin = ins[0][2];
            let cout = out_channels(node)?;
            if node.attrs.groups() != cin {
                return Err(err(
                    node,
                    format!("depthwise groups={} must equal input channels {cin}", node.attrs.groups()),
                ));
            }
            if cout % cin != 0 {
                return Err(err(node, format!("depthwise out={cout} not a multiple of in={cin}")));
            }
            let (h, w) = spatial(node, ins[0])?;
            [h, w, cout]
        }
        OpKind::Dense => {
            let [h, w, _] = ins[0];
            if h != 1 || w != 1 {
                return Err(err(node, format!("dense expects a 1x1 spatial input, got {:?}", ins[0])));
            }
            [1, 1, out_channels(node)?]
        }
        OpKind::AvgPool | OpKind::MaxPool => {
            let (h, w) = spatial(node, ins[0])?;
            [h, w, ins[0][2]]
        }
        OpKind::SpatialMean => [1, 1, ins[0][2]],
        OpKind::PadChannels | OpKind::TileChannels => {
            let out = out_channels(node)?;
            if out < ins[0][2] {
                return Err(err(node, format!("cannot expand {} channels to {out}", ins[0][2])));
            }
            [ins[0][0], ins[0][1], out]
        }
        OpKind::AvgChannels => {
            let out = out_channels(node)?;
            if out > ins[0][2] {
                return Err(err(node, format!("cannot contract {} channels to {out}", ins[0][2])));
            }
            [ins[0][0], ins[0][1], out]
        }
        OpKind::Add => {
            if ins[0] != ins[1] {
                return Err(GraphError::AddMismatch {
                    node: node.id.clone(),
                    lhs: ins[0],
                    rhs: ins[1],
                });
            }
            ins[0]
        }
        OpKind::Multiply => {
            let (a, b) = (ins[0], ins[1]);
            if a == b || (b[0] == 1 && b[1] == 1 && b[2] == a[2]) {
                a
            } else {
                return Err(err(node, format!("cannot broadcast {b:?} onto {a:?}")));
            }
        }
    };
    Ok(shape)
}
