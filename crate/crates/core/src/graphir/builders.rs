//! Builtin network builders.
//!
//! Every builder emits pre-lowered primitive nodes. The node id scheme is
//! hierarchical (`g03.pc2.local.pool`) so reports and checkpoints stay readable.

use std::collections::HashMap;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};

use super::{infer_node_shape, Attrs, DType, GraphError, GraphSpec, NodeSpec, OpKind, Padding, Shape};

/// Channel-expansion rule used by a ReshapeAdd shortcut.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualMode {
    /// Zero-pad new channels (local shortcuts around each binary conv).
    Pad,
    /// Repeat channels cyclically (block-level shortcuts).
    Tile,
}

/// Number of classes of the ImageNet-sized builtins.
pub const IMAGENET_CLASSES: usize = 1000;
/// Number of classes of the toy builtin.
pub const TOY_CLASSES: usize = 10;

/// Incremental graph construction with eager shape inference.
pub struct GraphBuilder {
    graph: GraphSpec,
    shapes: HashMap<String, Shape>,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>, input_shape: Shape, multiplier: Ratio<i64>) -> Self {
        GraphBuilder {
            graph: GraphSpec {
                name: name.into(),
                input_shape,
                channel_multiplier: multiplier,
                nodes: Vec::new(),
            },
            shapes: HashMap::new(),
        }
    }

    pub fn shape(&self, id: &str) -> Shape {
        self.shapes[id]
    }

    pub fn push(&mut self, id: impl Into<String>, op: OpKind, inputs: &[&str], attrs: Attrs) -> Result<String, GraphError> {
        let node = NodeSpec::new(id, op, inputs, attrs);
        let mut ins = Vec::with_capacity(inputs.len());
        for i in inputs {
            let s = self.shapes.get(*i).ok_or_else(|| GraphError::UnresolvedInput {
                node: node.id.clone(),
                input: i.to_string(),
            })?;
            ins.push(*s);
        }
        let shape = infer_node_shape(&node, &ins, self.graph.input_shape)?;
        let id = node.id.clone();
        self.shapes.insert(id.clone(), shape);
        self.graph.nodes.push(node);
        Ok(id)
    }

    pub fn input(&mut self) -> String {
        self.push("input", OpKind::Input, &[], Attrs::default())
            .expect("input node has no preconditions")
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        id: &str,
        x: &str,
        op: OpKind,
        kernel: usize,
        stride: usize,
        out: usize,
        groups: usize,
        act: DType,
        weight: DType,
    ) -> Result<String, GraphError> {
        let attrs = Attrs {
            kernel: Some([kernel, kernel]),
            stride: Some(stride),
            padding: Some(Padding::Same),
            out_channels: Some(out),
            groups: Some(groups),
            act_bits: Some(act),
            weight_bits: Some(weight),
            divisor: None,
        };
        self.push(id, op, &[x], attrs)
    }

    pub fn dense(&mut self, id: &str, x: &str, out: usize, act: DType, weight: DType) -> Result<String, GraphError> {
        let attrs = Attrs {
            out_channels: Some(out),
            act_bits: Some(act),
            weight_bits: Some(weight),
            ..Attrs::default()
        };
        self.push(id, OpKind::Dense, &[x], attrs)
    }

    pub fn unary(&mut self, id: &str, op: OpKind, x: &str) -> Result<String, GraphError> {
        self.push(id, op, &[x], Attrs::default())
    }

    fn channels_to(&mut self, id: &str, op: OpKind, x: &str, out: usize) -> Result<String, GraphError> {
        let attrs = Attrs {
            out_channels: Some(out),
            ..Attrs::default()
        };
        self.push(id, op, &[x], attrs)
    }

    fn pool(&mut self, id: &str, op: OpKind, x: &str, kernel: usize, stride: usize) -> Result<String, GraphError> {
        let attrs = Attrs {
            kernel: Some([kernel, kernel]),
            stride: Some(stride),
            padding: Some(Padding::Same),
            divisor: (op == OpKind::AvgPool).then(|| Ratio::from_integer((kernel * kernel) as i64)),
            ..Attrs::default()
        };
        self.push(id, op, &[x], attrs)
    }

    /// Lowered ReshapeAdd: channel expand/contract, then a 3x3/2 average pool
    /// if the spatial shapes still differ, then the addition.
    pub fn reshape_add(&mut self, prefix: &str, x: &str, r: &str, mode: ResidualMode) -> Result<String, GraphError> {
        let xs = self.shape(x);
        let mut r = r.to_string();
        let rs = self.shape(&r);
        if rs[2] < xs[2] {
            let op = match mode {
                ResidualMode::Pad => OpKind::PadChannels,
                ResidualMode::Tile => OpKind::TileChannels,
            };
            let suffix = match mode {
                ResidualMode::Pad => "pad",
                ResidualMode::Tile => "tile",
            };
            r = self.channels_to(&format!("{prefix}.{suffix}"), op, &r, xs[2])?;
        } else if rs[2] > xs[2] {
            r = self.channels_to(&format!("{prefix}.avg_ch"), OpKind::AvgChannels, &r, xs[2])?;
        }
        if self.shape(&r) != xs {
            r = self.pool(&format!("{prefix}.pool"), OpKind::AvgPool, &r, 3, 2)?;
        }
        let add = format!("{prefix}.add");
        self.push(add, OpKind::Add, &[x, &r], Attrs::default())
    }

    /// 4-bit squeeze-and-excitation gate computed from `r`, producing `out` channels.
    pub fn se_4b(&mut self, prefix: &str, r: &str, out: usize) -> Result<String, GraphError> {
        let hidden = (self.shape(r)[2] / 8).max(1);
        let s = self.unary(&format!("{prefix}.mean"), OpKind::SpatialMean, r)?;
        let s = self.dense(&format!("{prefix}.fc1"), &s, hidden, DType::Int4, DType::Int4)?;
        let s = self.unary(&format!("{prefix}.relu"), OpKind::Relu, &s)?;
        let s = self.dense(&format!("{prefix}.fc2"), &s, out, DType::Int4, DType::Int4)?;
        self.unary(&format!("{prefix}.hsig"), OpKind::Hardsigmoid, &s)
    }

    /// Binary conv block: conv, BN, local and block reshape-adds, DPReLU, SE gate, BN.
    pub fn pokeconv(
        &mut self,
        prefix: &str,
        x: &str,
        r1: Option<&str>,
        kernel: usize,
        ch: usize,
        stride: usize,
    ) -> Result<String, GraphError> {
        let conv = self.conv(
            &format!("{prefix}.conv"),
            x,
            OpKind::Conv2d,
            kernel,
            stride,
            ch,
            1,
            DType::Binary,
            DType::Binary,
        )?;
        let mut y = self.unary(&format!("{prefix}.bn1"), OpKind::Batchnorm, &conv)?;
        y = self.reshape_add(&format!("{prefix}.local"), &y, x, ResidualMode::Pad)?;
        if let Some(r1) = r1 {
            y = self.reshape_add(&format!("{prefix}.block"), &y, r1, ResidualMode::Tile)?;
        }
        y = self.unary(&format!("{prefix}.act"), OpKind::Dprelu, &y)?;
        let gate = self.se_4b(&format!("{prefix}.se"), x, ch)?;
        y = self.push(format!("{prefix}.gate"), OpKind::Multiply, &[&y, &gate], Attrs::default())?;
        self.unary(&format!("{prefix}.bn2"), OpKind::Batchnorm, &y)
    }

    /// 8-bit stem: 4x4/4 conv to 32 channels, then 3x3 depthwise with multiplier 2.
    pub fn pokeinit(&mut self, prefix: &str, x: &str) -> Result<String, GraphError> {
        let y = self.conv(&format!("{prefix}.conv"), x, OpKind::Conv2d, 4, 4, 32, 1, DType::Int8, DType::Int8)?;
        let y = self.unary(&format!("{prefix}.bn1"), OpKind::Batchnorm, &y)?;
        let y = self.unary(&format!("{prefix}.act1"), OpKind::Dprelu, &y)?;
        let y = self.conv(
            &format!("{prefix}.dw"),
            &y,
            OpKind::DepthwiseConv2d,
            3,
            1,
            64,
            32,
            DType::Int8,
            DType::Int8,
        )?;
        let y = self.unary(&format!("{prefix}.bn2"), OpKind::Batchnorm, &y)?;
        self.unary(&format!("{prefix}.act2"), OpKind::Dprelu, &y)
    }

    /// Three PokeConvs (1x1, 3x3 strided, 1x1 with 4x expansion) with the block shortcut on the third.
    pub fn bottleneck(&mut self, prefix: &str, x: &str, ch: usize, stride: usize) -> Result<String, GraphError> {
        let r = x.to_string();
        let y = self.pokeconv(&format!("{prefix}.pc1"), x, None, 1, ch, 1)?;
        let y = self.pokeconv(&format!("{prefix}.pc2"), &y, None, 3, ch, stride)?;
        self.pokeconv(&format!("{prefix}.pc3"), &y, Some(&r), 1, 4 * ch, 1)
    }

    pub fn finish(mut self, last: &str) -> Result<GraphSpec, GraphError> {
        self.unary("output", OpKind::Output, last)?;
        Ok(self.graph)
    }
}

/// `floor(64 * M * 2^s)` for the four stages.
pub fn pokebnn_stage_channels(multiplier: Ratio<i64>) -> Result<[usize; 4], GraphError> {
    if multiplier <= Ratio::zero() {
        return Err(GraphError::ChannelMultiplier(
            multiplier.to_string(),
            "must be positive".into(),
        ));
    }
    let mut chs = [0usize; 4];
    for (s, ch) in chs.iter_mut().enumerate() {
        let v = (multiplier * Ratio::from_integer(64i64 << s)).floor().to_integer();
        if v <= 0 {
            return Err(GraphError::ChannelMultiplier(
                multiplier.to_string(),
                format!("stage {s} has no channels"),
            ));
        }
        *ch = v as usize;
    }
    Ok(chs)
}

/// Parses `"1.4"`, `"7/5"` or `"2"` into an exact ratio.
pub fn parse_multiplier(s: &str) -> Option<Ratio<i64>> {
    let s = s.trim();
    if let Some((n, d)) = s.split_once('/') {
        let (n, d): (i64, i64) = (n.trim().parse().ok()?, d.trim().parse().ok()?);
        return (d != 0).then(|| Ratio::new(n, d));
    }
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if frac.len() > 9 || !frac.chars().all(|c| c.is_ascii_digit()) || int.starts_with('-') {
        return None;
    }
    let int: i64 = if int.is_empty() { 0 } else { int.parse().ok()? };
    let scale = 10i64.pow(frac.len() as u32);
    let frac: i64 = if frac.is_empty() { 0 } else { frac.parse().ok()? };
    Some(Ratio::new(int.checked_mul(scale)?.checked_add(frac)?, scale))
}

pub(crate) fn multiplier_label(m: Ratio<i64>) -> String {
    let v = m.to_f64().unwrap_or(f64::NAN);
    let mut s = format!("{v:.4}");
    while s.ends_with('0') && !s.ends_with(".0") {
        s.pop();
    }
    s
}

fn pokebnn_head(b: &mut GraphBuilder, x: &str, classes: usize) -> Result<String, GraphError> {
    let s = b.unary("head.mean", OpKind::SpatialMean, x)?;
    b.dense("head.fc", &s, classes, DType::Int8, DType::Int8)
}

/// Full ImageNet-sized PokeBNN with channel multiplier `M`.
pub fn build_pokebnn(multiplier: Ratio<i64>) -> Result<GraphSpec, GraphError> {
    let chs = pokebnn_stage_channels(multiplier)?;
    let name = format!("pokebnn-{}x", multiplier_label(multiplier));
    let mut b = GraphBuilder::new(name, [224, 224, 3], multiplier);
    let x = b.input();
    let mut x = b.pokeinit("init", &x)?;
    for i in 0..16 {
        let stride = if matches!(i, 3 | 7 | 13) { 2 } else { 1 };
        let stage = match i {
            0..=2 => 0,
            3..=6 => 1,
            7..=12 => 2,
            _ => 3,
        };
        x = b.bottleneck(&format!("g{i:02}"), &x, chs[stage], stride)?;
    }
    let logits = pokebnn_head(&mut b, &x, IMAGENET_CLASSES)?;
    b.finish(&logits)
}

/// Stage index of each group of a toy model: the last `min(3, groups-1)` groups each open a new stage.
pub fn toy_group_stages(groups: usize) -> Vec<usize> {
    let strided = 3.min(groups.saturating_sub(1));
    let first_strided = groups - strided;
    (0..groups)
        .map(|i| if i < first_strided { 0 } else { i - first_strided + 1 })
        .collect()
}

/// Desk-scale PokeBNN with 10 classes.
pub fn build_pokebnn_toy(multiplier: Ratio<i64>, groups: usize, input_shape: Shape) -> Result<GraphSpec, GraphError> {
    build_pokebnn_toy_with_classes(multiplier, groups, input_shape, TOY_CLASSES)
}

pub fn build_pokebnn_toy_with_classes(
    multiplier: Ratio<i64>,
    groups: usize,
    input_shape: Shape,
    classes: usize,
) -> Result<GraphSpec, GraphError> {
    if groups < 2 {
        return Err(GraphError::Argument(format!("toy model needs at least 2 groups, got {groups}")));
    }
    if input_shape[0] < 16 || input_shape[1] < 16 {
        return Err(GraphError::Argument(format!(
            "toy input must be at least 16x16, got {}x{}",
            input_shape[0], input_shape[1]
        )));
    }
    if classes == 0 {
        return Err(GraphError::Argument("class count must be positive".into()));
    }
    let chs = pokebnn_stage_channels(multiplier)?;
    let name = format!("pokebnn-toy-{}x-g{groups}", multiplier_label(multiplier));
    let mut b = GraphBuilder::new(name, input_shape, multiplier);
    let x = b.input();
    let mut x = b.pokeinit("init", &x)?;
    let stages = toy_group_stages(groups);
    for (i, &stage) in stages.iter().enumerate() {
        let stride = if i > 0 && stage != stages[i - 1] { 2 } else { 1 };
        let [h, w, _] = b.shape(&x);
        if stride == 2 && h.min(w) < 2 {
            return Err(GraphError::Underflow {
                node: format!("g{i:02}"),
                size: h.min(w),
            });
        }
        x = b.bottleneck(&format!("g{i:02}"), &x, chs[stage], stride)?;
    }
    let logits = pokebnn_head(&mut b, &x, classes)?;
    b.finish(&logits)
}

/// ResNet-50 with every conv and the classifier at the given bitwidth pair.
///
/// Downsampling bottlenecks stride on the 3x3 conv and use a strided 1x1
/// projection shortcut.
pub fn build_resnet50(act: DType, weight: DType) -> Result<GraphSpec, GraphError> {
    let name = if act == weight {
        format!("resnet50-{}", act.tag())
    } else {
        format!("resnet50-{}-{}", act.tag(), weight.tag())
    };
    let mut b = GraphBuilder::new(name, [224, 224, 3], Ratio::from_integer(1));
    let x = b.input();
    let x = b.conv("stem.conv", &x, OpKind::Conv2d, 7, 2, 64, 1, act, weight)?;
    let x = b.unary("stem.bn", OpKind::Batchnorm, &x)?;
    let x = b.unary("stem.relu", OpKind::Relu, &x)?;
    let mut x = b.pool("stem.pool", OpKind::MaxPool, &x, 3, 2)?;
    let mut block = 0;
    for (stage, (&n, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
        for j in 0..n {
            let stride = if j == 0 && stage > 0 { 2 } else { 1 };
            let p = format!("b{block:02}");
            let y = b.conv(&format!("{p}.conv1"), &x, OpKind::Conv2d, 1, 1, width, 1, act, weight)?;
            let y = b.unary(&format!("{p}.bn1"), OpKind::Batchnorm, &y)?;
            let y = b.unary(&format!("{p}.relu1"), OpKind::Relu, &y)?;
            let y = b.conv(&format!("{p}.conv2"), &y, OpKind::Conv2d, 3, stride, width, 1, act, weight)?;
            let y = b.unary(&format!("{p}.bn2"), OpKind::Batchnorm, &y)?;
            let y = b.unary(&format!("{p}.relu2"), OpKind::Relu, &y)?;
            let y = b.conv(&format!("{p}.conv3"), &y, OpKind::Conv2d, 1, 1, 4 * width, 1, act, weight)?;
            let y = b.unary(&format!("{p}.bn3"), OpKind::Batchnorm, &y)?;
            let shortcut = if j == 0 {
                let s = b.conv(&format!("{p}.proj"), &x, OpKind::Conv2d, 1, stride, 4 * width, 1, act, weight)?;
                b.unary(&format!("{p}.proj_bn"), OpKind::Batchnorm, &s)?
            } else {
                x.clone()
            };
            let y = b.push(format!("{p}.add"), OpKind::Add, &[&y, &shortcut], Attrs::default())?;
            x = b.unary(&format!("{p}.relu3"), OpKind::Relu, &y)?;
            block += 1;
        }
    }
    let s = b.unary("head.mean", OpKind::SpatialMean, &x)?;
    let logits = b.dense("head.fc", &s, IMAGENET_CLASSES, act, weight)?;
    b.finish(&logits)
}

fn set_bits(g: &mut GraphSpec, ids: &[&str], act: DType, weight: DType) {
    for n in g.nodes.iter_mut().filter(|n| ids.contains(&n.id.as_str())) {
        n.attrs.act_bits = Some(act);
        n.attrs.weight_bits = Some(weight);
    }
}

const POKEBNN_MULTIPLIERS: [(&str, i64, i64); 8] = [
    ("0.5", 1, 2),
    ("0.75", 3, 4),
    ("1.0", 1, 1),
    ("1.25", 5, 4),
    ("1.4", 7, 5),
    ("1.5", 3, 2),
    ("1.75", 7, 4),
    ("2.0", 2, 1),
];

/// Names accepted by [`builtin`], sorted.
pub fn builtin_names() -> Vec<String> {
    let mut names: Vec<String> = POKEBNN_MULTIPLIERS
        .iter()
        .map(|(label, _, _)| format!("pokebnn-{label}x"))
        .collect();
    names.extend(
        ["pokebnn-1.0x-bf16", "pokebnn-toy", "resnet50-bf16", "resnet50-fp32", "resnet50-int4"]
            .iter()
            .map(|s| s.to_string()),
    );
    names.sort();
    names
}

/// Resolve a builtin model by name.
pub fn builtin(name: &str) -> Option<GraphSpec> {
    let mut g = match name {
        "resnet50-fp32" => build_resnet50(DType::Fp32, DType::Fp32).ok()?,
        "resnet50-bf16" => build_resnet50(DType::Bf16, DType::Bf16).ok()?,
        "resnet50-int4" => {
            // First conv and classifier stay at 8 bits.
            let mut g = build_resnet50(DType::Int4, DType::Int4).ok()?;
            set_bits(&mut g, &["stem.conv", "head.fc"], DType::Int8, DType::Int8);
            g
        }
        "pokebnn-toy" => build_pokebnn_toy(Ratio::from_integer(1), 4, [32, 32, 3]).ok()?,
        "pokebnn-1.0x-bf16" => {
            let mut g = build_pokebnn(Ratio::from_integer(1)).ok()?;
            for n in g.nodes.iter_mut().filter(|n| n.op.is_mac()) {
                n.attrs.act_bits = Some(DType::Bf16);
                n.attrs.weight_bits = Some(DType::Bf16);
            }
            g
        }
        _ => {
            let label = name.strip_prefix("pokebnn-")?.strip_suffix('x')?;
            let (_, n, d) = POKEBNN_MULTIPLIERS.iter().find(|(l, _, _)| *l == label)?;
            build_pokebnn(Ratio::new(*n, *d)).ok()?
        }
    };
    g.name = name.to_string();
    Some(g)
}
