//! Graph interpreter: parameters, BatchNorm state and activation bounds for
//! every node of a [`GraphSpec`], with a recorded forward pass.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::quantize::{binarize, fake_quant, weight_bounds, Bounds, QuantForm};
use super::{BnMode, Grads, NnError, Tape, Tensor, Var};
use crate::graphir::{infer_shapes, validate_graph, DType, GraphSpec, NodeSpec, OpKind, ShapeMap};
use crate::quant::{update_ema_bound, BoundState, DEFAULT_EMA_ALPHA, DEFAULT_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch statistics in BatchNorm.
    Train,
    /// Running statistics in BatchNorm.
    Eval,
}

/// Which quantizers are active. Binary activations are active in both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Only 1-bit activations are quantized.
    One,
    /// Every activation and weight quantizer is active.
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Gradient bound `B` of the binary activation quantizer.
    pub binary_act_bound: f64,
    /// Fixed gradient bound for binary weights; `None` uses the per-channel `max |w|`.
    pub binary_weight_bound: Option<f64>,
    pub bn_momentum: f64,
    pub ema_alpha: f64,
    pub epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            binary_act_bound: 3.0,
            binary_weight_bound: None,
            bn_momentum: 0.9,
            ema_alpha: DEFAULT_EMA_ALPHA,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub phase: Phase,
    pub form: QuantForm,
    /// Update BatchNorm running statistics and unfrozen activation bounds (train mode only).
    pub update_state: bool,
}

impl ForwardOptions {
    pub fn new(mode: Mode, phase: Phase) -> Self {
        ForwardOptions {
            mode,
            phase,
            form: QuantForm::Exact,
            update_state: mode == Mode::Train,
        }
    }
}

/// A recorded forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    /// Output of every graph node, aligned with `graph.nodes`.
    pub nodes: Vec<Var>,
    pub params: BTreeMap<String, Var>,
}

impl ForwardPass {
    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    graph: GraphSpec,
    shapes: ShapeMap,
    pub config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    running: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    bounds: BTreeMap<String, BoundState>,
}

fn act_quant_bits(node: &NodeSpec) -> Option<u32> {
    let quantized = node.op.is_mac() || node.op == OpKind::QuantizeAct;
    match node.attrs.act_bits {
        Some(d) if quantized && !d.is_float() && d != DType::Binary => Some(d.bits()),
        _ => None,
    }
}

impl Model {
    pub fn new(graph: GraphSpec, config: ModelConfig, seed: u64) -> Result<Model, NnError> {
        let diags = validate_graph(&graph);
        if !diags.is_empty() {
            return Err(NnError::Graph(
                diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "),
            ));
        }
        let shapes = infer_shapes(&graph).map_err(|e| NnError::Graph(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut running = BTreeMap::new();
        let mut bounds = BTreeMap::new();
        for node in &graph.nodes {
            let out = shapes[&node.id];
            let c = out[2];
            let input = node.inputs.first().map(|i| shapes[i]);
            match node.op {
                OpKind::Conv2d | OpKind::DepthwiseConv2d => {
                    let [kh, kw] = node.attrs.kernel();
                    let cig = input.unwrap()[2] / node.attrs.groups();
                    let lim = (6.0 / (kh * kw * cig) as f64).sqrt();
                    params.insert(format!("{}.weight", node.id), Tensor::uniform([kh, kw, cig, c], lim, &mut rng));
                }
                OpKind::Dense => {
                    let n_in = input.unwrap()[2];
                    let lim = (6.0 / (n_in + c) as f64).sqrt();
                    params.insert(format!("{}.weight", node.id), Tensor::uniform([1, 1, n_in, c], lim, &mut rng));
                    if Model::dense_has_bias(&graph, node) {
                        params.insert(format!("{}.bias", node.id), Tensor::zeros([1, 1, 1, c]));
                    }
                }
                OpKind::Batchnorm => {
                    params.insert(format!("{}.scale", node.id), Tensor::full([1, 1, 1, c], 1.0));
                    params.insert(format!("{}.bias", node.id), Tensor::zeros([1, 1, 1, c]));
                    running.insert(node.id.clone(), (vec![0.0; c], vec![1.0; c]));
                }
                OpKind::Dprelu => {
                    for (name, v) in [("alpha", 0.0), ("beta", 0.0), ("gamma", 0.25), ("eta", 1.0)] {
                        params.insert(format!("{}.{name}", node.id), Tensor::full([1, 1, 1, c], v));
                    }
                }
                _ => {}
            }
            if act_quant_bits(node).is_some() {
                bounds.insert(node.id.clone(), BoundState::uninitialized(config.ema_alpha));
            }
        }
        Ok(Model {
            graph,
            shapes,
            config,
            params,
            running,
            bounds,
        })
    }

    /// Dense layers carry a bias unless a BatchNorm consumes them.
    fn dense_has_bias(g: &GraphSpec, node: &NodeSpec) -> bool {
        !g.consumers(&node.id).iter().any(|c| c.op == OpKind::Batchnorm)
    }

    pub fn graph(&self) -> &GraphSpec {
        &self.graph
    }

    pub fn classes(&self) -> usize {
        let out = self.graph.nodes.last().expect("validated graph has an output");
        self.shapes[&out.id][2]
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    /// Parameters eligible for weight decay: conv and dense kernels.
    pub fn is_weight(name: &str) -> bool {
        name.ends_with(".weight")
    }

    pub fn bound_states(&self) -> &BTreeMap<String, BoundState> {
        &self.bounds
    }

    pub fn running_stats(&self) -> &BTreeMap<String, (Vec<f64>, Vec<f64>)> {
        &self.running
    }

    /// Freeze every activation bound. Returns how many states changed.
    pub fn freeze_bounds(&mut self) -> usize {
        let mut n = 0;
        for s in self.bounds.values_mut() {
            if !s.frozen {
                s.freeze();
                n += 1;
            }
        }
        n
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode, phase: Phase) -> Result<ForwardPass, NnError> {
        self.forward_opts(x, ForwardOptions::new(mode, phase))
    }

    pub fn forward_opts(&mut self, x: &Tensor, opts: ForwardOptions) -> Result<ForwardPass, NnError> {
        let [h, w, c] = self.graph.input_shape;
        if x.shape[1..] != [h, w, c] || x.batch() == 0 {
            return Err(NnError::Shape(format!(
                "input {:?} does not match graph input {:?}",
                x.shape, self.graph.input_shape
            )));
        }
        let mut tape = Tape::new();
        let mut params = BTreeMap::new();
        for (name, t) in &self.params {
            params.insert(name.clone(), tape.param(t.clone()));
        }
        let p = |name: String| -> Result<Var, NnError> { params.get(&name).copied().ok_or(NnError::MissingParam(name)) };
        let mut ids: BTreeMap<&str, Var> = BTreeMap::new();
        let mut nodes = Vec::with_capacity(self.graph.nodes.len());
        let mut bn_updates = Vec::new();
        let mut bound_updates = Vec::new();
        let mut logits = None;
        for node in &self.graph.nodes {
            let ins: Vec<Var> = node.inputs.iter().map(|i| ids[i.as_str()]).collect();
            let id = node.id.as_str();
            let a = &node.attrs;
            let v = match node.op {
                OpKind::Input => tape.constant(x.clone()),
                OpKind::Output => {
                    logits = Some(ins[0]);
                    ins[0]
                }
                OpKind::Conv2d | OpKind::DepthwiseConv2d | OpKind::Dense | OpKind::QuantizeAct => {
                    let xin = self.quantize_input(&mut tape, node, ins[0], opts, &mut bound_updates)?;
                    if node.op == OpKind::QuantizeAct {
                        xin
                    } else {
                        let w = p(format!("{id}.weight"))?;
                        let w = self.quantize_weight(&mut tape, node, w, opts)?;
                        if node.op == OpKind::Dense {
                            let b = params.get(&format!("{id}.bias")).copied();
                            tape.dense(xin, w, b)?
                        } else {
                            tape.conv2d(xin, w, a.stride(), a.padding(), a.groups())?
                        }
                    }
                }
                OpKind::Batchnorm => {
                    let (scale, bias) = (p(format!("{id}.scale"))?, p(format!("{id}.bias"))?);
                    let (mean, var) = &self.running[id];
                    let bn_mode = match opts.mode {
                        Mode::Train => BnMode::Batch,
                        Mode::Eval => BnMode::Running { mean, var },
                    };
                    let (v, stats) = tape.batchnorm(ins[0], scale, bias, bn_mode)?;
                    if let Some(s) = stats {
                        bn_updates.push((id.to_string(), s));
                    }
                    v
                }
                OpKind::Dprelu => {
                    let [al, be, ga, et] = ["alpha", "beta", "gamma", "eta"].map(|n| p(format!("{id}.{n}")));
                    tape.dprelu(ins[0], al?, be?, ga?, et?)?
                }
                OpKind::Relu => tape.relu(ins[0]),
                OpKind::Hardsigmoid => tape.hardsigmoid(ins[0]),
                OpKind::Add => tape.add(ins[0], ins[1])?,
                OpKind::Multiply => tape.multiply(ins[0], ins[1])?,
                OpKind::PadChannels => tape.pad_channels(ins[0], self.shapes[id][2])?,
                OpKind::TileChannels => tape.tile_channels(ins[0], self.shapes[id][2])?,
                OpKind::AvgChannels => tape.avg_channels(ins[0], self.shapes[id][2])?,
                OpKind::AvgPool => {
                    let [k, _] = a.kernel();
                    let div = a.divisor.map_or((k * k) as f64, |r| *r.numer() as f64 / *r.denom() as f64);
                    tape.avg_pool(ins[0], k, a.stride(), a.padding(), div)?
                }
                OpKind::MaxPool => tape.max_pool(ins[0], a.kernel()[0], a.stride(), a.padding())?,
                OpKind::SpatialMean => tape.spatial_mean(ins[0]),
            };
            ids.insert(id, v);
            nodes.push(v);
        }
        let logits = logits.ok_or_else(|| NnError::Graph("graph has no output node".into()))?;
        if !tape.value(logits).all_finite() {
            return Err(NnError::NonFinite("logits".into()));
        }
        if opts.update_state && opts.mode == Mode::Train {
            let m = self.config.bn_momentum;
            for (id, s) in bn_updates {
                let (mean, var) = self.running.get_mut(&id).expect("bn state exists");
                mean.iter_mut().zip(&s.mean).for_each(|(r, b)| *r = m * *r + (1.0 - m) * b);
                var.iter_mut().zip(&s.var).for_each(|(r, b)| *r = m * *r + (1.0 - m) * b);
            }
            for (id, state) in bound_updates {
                self.bounds.insert(id, state);
            }
        }
        Ok(ForwardPass {
            tape,
            logits,
            nodes,
            params,
        })
    }

    fn quantize_input(
        &self,
        tape: &mut Tape,
        node: &NodeSpec,
        x: Var,
        opts: ForwardOptions,
        updates: &mut Vec<(String, BoundState)>,
    ) -> Result<Var, NnError> {
        if node.attrs.act_bits == Some(DType::Binary) && node.op != OpKind::QuantizeAct {
            return binarize(tape, x, &Bounds::PerTensor(self.config.binary_act_bound), opts.form);
        }
        let Some(bits) = act_quant_bits(node) else { return Ok(x) };
        let mut state = self.bounds[&node.id].clone();
        if opts.update_state && opts.mode == Mode::Train && !state.frozen {
            state = update_ema_bound(&state, &tape.value(x).data)?;
            updates.push((node.id.clone(), state.clone()));
        }
        if opts.phase == Phase::One {
            return Ok(x);
        }
        if !state.initialized {
            return Err(NnError::Phase(format!(
                "activation bound of `{}` was never calibrated before quantization",
                node.id
            )));
        }
        fake_quant(tape, x, bits, &Bounds::PerTensor(state.bound), self.config.epsilon, opts.form)
    }

    fn quantize_weight(&self, tape: &mut Tape, node: &NodeSpec, w: Var, opts: ForwardOptions) -> Result<Var, NnError> {
        let Some(wb) = node.attrs.weight_bits else { return Ok(w) };
        if opts.phase == Phase::One || wb.is_float() {
            return Ok(w);
        }
        let per_channel = Bounds::PerChannel(weight_bounds(tape.value(w), self.config.epsilon));
        if wb == DType::Binary {
            let bound = match self.config.binary_weight_bound {
                Some(b) => Bounds::PerTensor(b),
                None => per_channel,
            };
            binarize(tape, w, &bound, opts.form)
        } else {
            fake_quant(tape, w, wb.bits(), &per_channel, self.config.epsilon, opts.form)
        }
    }

    /// Parameter gradients of a scalar recorded on `pass`; untouched parameters get zeros.
    pub fn backward(&self, pass: &ForwardPass, loss: Var) -> Result<BTreeMap<String, Tensor>, NnError> {
        let grads = pass.tape.backward(loss)?;
        Ok(self.collect(pass, grads))
    }

    /// Parameter gradients for an arbitrary upstream gradient on `out`.
    pub fn backward_with(&self, pass: &ForwardPass, out: Var, seed: Tensor) -> Result<BTreeMap<String, Tensor>, NnError> {
        let grads = pass.tape.backward_with(out, seed)?;
        Ok(self.collect(pass, grads))
    }

    fn collect(&self, pass: &ForwardPass, mut grads: Grads) -> BTreeMap<String, Tensor> {
        pass.params
            .iter()
            .map(|(name, &v)| {
                let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(self.params[name].shape));
                (name.clone(), g)
            })
            .collect()
    }

    /// Parameters, BatchNorm running statistics and activation bounds as named tensors.
    pub fn state_dict(&self) -> BTreeMap<String, Tensor> {
        let mut out = self.params.clone();
        for (id, (mean, var)) in &self.running {
            out.insert(format!("{id}.running_mean"), Tensor::vector(mean.clone()));
            out.insert(format!("{id}.running_var"), Tensor::vector(var.clone()));
        }
        for (id, s) in &self.bounds {
            let flags = [s.bound, s.frozen as u8 as f64, s.initialized as u8 as f64, s.ema_alpha];
            out.insert(format!("{id}.act_bound"), Tensor::vector(flags.to_vec()));
        }
        out
    }

    /// Inverse of [`Model::state_dict`]; every entry must be present with a matching shape.
    pub fn load_state_dict(&mut self, mut state: BTreeMap<String, Tensor>) -> Result<(), NnError> {
        let mut take = |name: String, shape: [usize; 4]| -> Result<Tensor, NnError> {
            let t = state.remove(&name).ok_or_else(|| NnError::MissingParam(name.clone()))?;
            if t.shape != shape {
                return Err(NnError::Shape(format!("{name}: stored {:?}, expected {shape:?}", t.shape)));
            }
            Ok(t)
        };
        let mut params = BTreeMap::new();
        for (name, t) in &self.params {
            params.insert(name.clone(), take(name.clone(), t.shape)?);
        }
        let mut running = BTreeMap::new();
        for (id, (mean, _)) in &self.running {
            let c = mean.len();
            let m = take(format!("{id}.running_mean"), [1, 1, 1, c])?;
            let v = take(format!("{id}.running_var"), [1, 1, 1, c])?;
            running.insert(id.clone(), (m.data, v.data));
        }
        let mut bounds = BTreeMap::new();
        for id in self.bounds.keys() {
            let t = take(format!("{id}.act_bound"), [1, 1, 1, 4])?;
            bounds.insert(
                id.clone(),
                BoundState {
                    bound: t.data[0],
                    frozen: t.data[1] != 0.0,
                    initialized: t.data[2] != 0.0,
                    ema_alpha: t.data[3],
                },
            );
        }
        if let Some(extra) = state.keys().next() {
            return Err(NnError::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        self.params = params;
        self.running = running;
        self.bounds = bounds;
        Ok(())
    }
}
