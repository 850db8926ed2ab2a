//! Composite blocks written directly against the tape.
//!
//! These mirror the lowered subgraphs emitted by the graph builders and are
//! used on their own for block-level experiments and as a second
//! implementation the graph interpreter is cross-checked against.

use rand::Rng;

use super::quantize::{binarize, fake_quant, weight_bounds, Bounds, QuantForm};
use super::{BnMode, Mode, NnError, Phase, Tape, Tensor, Var};
use crate::graphir::{Padding, ResidualMode};

/// DPReLU parameters; initialized to `(α, β, γ, η) = (0, 0, 0.25, 1)`.
#[derive(Debug, Clone, Copy)]
pub struct DprParams {
    pub alpha: Var,
    pub beta: Var,
    pub gamma: Var,
    pub eta: Var,
}

impl DprParams {
    pub fn init(tape: &mut Tape, c: usize) -> Self {
        DprParams {
            alpha: tape.param(Tensor::zeros([1, 1, 1, c])),
            beta: tape.param(Tensor::zeros([1, 1, 1, c])),
            gamma: tape.param(Tensor::full([1, 1, 1, c], 0.25)),
            eta: tape.param(Tensor::full([1, 1, 1, c], 1.0)),
        }
    }
}

pub fn dprelu(tape: &mut Tape, x: Var, p: &DprParams) -> Result<Var, NnError> {
    tape.dprelu(x, p.alpha, p.beta, p.gamma, p.eta)
}

/// BatchNorm scale/bias plus running statistics (used in eval mode).
#[derive(Debug, Clone)]
pub struct BnParams {
    pub scale: Var,
    pub bias: Var,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnParams {
    pub fn init(tape: &mut Tape, c: usize) -> Self {
        BnParams {
            scale: tape.param(Tensor::full([1, 1, 1, c], 1.0)),
            bias: tape.param(Tensor::zeros([1, 1, 1, c])),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }
}

pub fn batchnorm(tape: &mut Tape, x: Var, p: &BnParams, mode: Mode) -> Result<Var, NnError> {
    let bn_mode = match mode {
        Mode::Train => BnMode::Batch,
        Mode::Eval => BnMode::Running {
            mean: &p.running_mean,
            var: &p.running_var,
        },
    };
    Ok(tape.batchnorm(x, p.scale, p.bias, bn_mode)?.0)
}

/// Quantizer settings for a block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockQuant {
    pub phase: Phase,
    pub form: QuantForm,
    /// Gradient bound of the binary activation quantizer.
    pub binary_act_bound: f64,
    /// Activation bounds of the two quantized layers inside the block
    /// (the SE dense inputs, or PokeInit's two convs).
    pub act_bounds: [f64; 2],
    pub epsilon: f64,
}

impl BlockQuant {
    pub fn new(phase: Phase) -> Self {
        BlockQuant {
            phase,
            form: QuantForm::Exact,
            binary_act_bound: 3.0,
            act_bounds: [1.0, 1.0],
            epsilon: crate::quant::DEFAULT_EPSILON,
        }
    }

    fn weights(&self, tape: &mut Tape, w: Var, bits: u32) -> Result<Var, NnError> {
        if self.phase == Phase::One {
            return Ok(w);
        }
        let bounds = Bounds::PerChannel(weight_bounds(tape.value(w), self.epsilon));
        if bits == 1 {
            binarize(tape, w, &bounds, self.form)
        } else {
            fake_quant(tape, w, bits, &bounds, self.epsilon, self.form)
        }
    }

    fn acts(&self, tape: &mut Tape, x: Var, bits: u32, which: usize) -> Result<Var, NnError> {
        if self.phase == Phase::One {
            return Ok(x);
        }
        fake_quant(tape, x, bits, &Bounds::PerTensor(self.act_bounds[which]), self.epsilon, self.form)
    }
}

fn conv_init<R: Rng>(tape: &mut Tape, shape: [usize; 4], rng: &mut R) -> Var {
    let fan_in = (shape[0] * shape[1] * shape[2]) as f64;
    tape.param(Tensor::uniform(shape, (6.0 / fan_in).sqrt(), rng))
}

fn dense_init<R: Rng>(tape: &mut Tape, n_in: usize, n_out: usize, rng: &mut R) -> (Var, Var) {
    let lim = (6.0 / (n_in + n_out) as f64).sqrt();
    (
        tape.param(Tensor::uniform([1, 1, n_in, n_out], lim, rng)),
        tape.param(Tensor::zeros([1, 1, 1, n_out])),
    )
}

/// Weights of the 4-bit squeeze-and-excitation gate.
#[derive(Debug, Clone, Copy)]
pub struct SeParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl SeParams {
    pub fn init<R: Rng>(tape: &mut Tape, c_in: usize, c_out: usize, rng: &mut R) -> Result<Self, NnError> {
        let hidden = se_hidden(c_in)?;
        let (w1, b1) = dense_init(tape, c_in, hidden, rng);
        let (w2, b2) = dense_init(tape, hidden, c_out, rng);
        Ok(SeParams { w1, b1, w2, b2 })
    }
}

/// Hidden width `c / 8`; `c` must be a multiple of 8.
pub fn se_hidden(c: usize) -> Result<usize, NnError> {
    if c == 0 || c % 8 != 0 {
        return Err(NnError::ChannelMismatch {
            what: "SE input channels (multiple of 8)".into(),
            expected: c.div_ceil(8).max(1) * 8,
            found: c,
        });
    }
    Ok(c / 8)
}

/// Per-channel gate in `[0, 1]` of shape `[N, 1, 1, out]` computed from `r`.
pub fn se_4b(tape: &mut Tape, r: Var, p: &SeParams, q: &BlockQuant) -> Result<Var, NnError> {
    se_hidden(tape.value(r).channels())?;
    let s = tape.spatial_mean(r);
    let s = q.acts(tape, s, 4, 0)?;
    let w1 = q.weights(tape, p.w1, 4)?;
    let s = tape.dense(s, w1, Some(p.b1))?;
    let s = tape.relu(s);
    let s = q.acts(tape, s, 4, 1)?;
    let w2 = q.weights(tape, p.w2, 4)?;
    let s = tape.dense(s, w2, Some(p.b2))?;
    Ok(tape.hardsigmoid(s))
}

/// Reshape `r` to the shape of `x` and add: channel expand (`mode`) or
/// average, then a 3x3 stride-2 average pool if the spatial shapes differ.
pub fn reshape_add(tape: &mut Tape, x: Var, r: Var, mode: ResidualMode) -> Result<Var, NnError> {
    let xs = tape.value(x).shape;
    let rs = tape.value(r).shape;
    let (cx, cr) = (xs[3], rs[3]);
    let mut r = r;
    if cr < cx {
        if cx % cr != 0 {
            return Err(NnError::Ratio { from: cr, to: cx });
        }
        r = match mode {
            ResidualMode::Pad => tape.pad_channels(r, cx)?,
            ResidualMode::Tile => tape.tile_channels(r, cx)?,
        };
    } else if cr > cx {
        if cr % cx != 0 {
            return Err(NnError::Ratio { from: cr, to: cx });
        }
        r = tape.avg_channels(r, cx)?;
    }
    if tape.value(r).shape != xs {
        r = tape.avg_pool(r, 3, 2, Padding::Same, 9.0)?;
        if tape.value(r).shape != xs {
            return Err(NnError::Shape(format!("shortcut {rs:?} cannot be reshaped to {xs:?}")));
        }
    }
    tape.add(x, r)
}

#[derive(Debug, Clone)]
pub struct PokeConvParams {
    pub conv: Var,
    pub bn1: BnParams,
    pub act: DprParams,
    pub se: SeParams,
    pub bn2: BnParams,
}

impl PokeConvParams {
    pub fn init<R: Rng>(tape: &mut Tape, c_in: usize, ch: usize, kernel: usize, rng: &mut R) -> Result<Self, NnError> {
        Ok(PokeConvParams {
            conv: conv_init(tape, [kernel, kernel, c_in, ch], rng),
            bn1: BnParams::init(tape, ch),
            act: DprParams::init(tape, ch),
            se: SeParams::init(tape, c_in, ch, rng)?,
            bn2: BnParams::init(tape, ch),
        })
    }
}

/// Binary conv → BN → local pad-add of `x` → block tile-add of `r1` →
/// DPReLU → SE gate from `x` → BN.
pub fn pokeconv(
    tape: &mut Tape,
    x: Var,
    r1: Option<Var>,
    stride: usize,
    p: &PokeConvParams,
    mode: Mode,
    q: &BlockQuant,
) -> Result<Var, NnError> {
    let xb = binarize(tape, x, &Bounds::PerTensor(q.binary_act_bound), q.form)?;
    let w = q.weights(tape, p.conv, 1)?;
    let y = tape.conv2d(xb, w, stride, Padding::Same, 1)?;
    let y = batchnorm(tape, y, &p.bn1, mode)?;
    let mut y = reshape_add(tape, y, x, ResidualMode::Pad)?;
    if let Some(r1) = r1 {
        y = reshape_add(tape, y, r1, ResidualMode::Tile)?;
    }
    let y = dprelu(tape, y, &p.act)?;
    let gate = se_4b(tape, x, &p.se, q)?;
    let y = tape.multiply(y, gate)?;
    batchnorm(tape, y, &p.bn2, mode)
}

#[derive(Debug, Clone)]
pub struct PokeInitParams {
    pub conv: Var,
    pub bn1: BnParams,
    pub act1: DprParams,
    pub dw: Var,
    pub bn2: BnParams,
    pub act2: DprParams,
}

impl PokeInitParams {
    pub fn init<R: Rng>(tape: &mut Tape, c_in: usize, rng: &mut R) -> Self {
        PokeInitParams {
            conv: conv_init(tape, [4, 4, c_in, 32], rng),
            bn1: BnParams::init(tape, 32),
            act1: DprParams::init(tape, 32),
            dw: conv_init(tape, [3, 3, 1, 64], rng),
            bn2: BnParams::init(tape, 64),
            act2: DprParams::init(tape, 64),
        }
    }
}

/// 8-bit 4x4/4 conv to 32 channels, BN, DPReLU, 8-bit 3x3 depthwise to 64, BN, DPReLU.
pub fn pokeinit(tape: &mut Tape, x: Var, p: &PokeInitParams, mode: Mode, q: &BlockQuant) -> Result<Var, NnError> {
    let xq = q.acts(tape, x, 8, 0)?;
    let w = q.weights(tape, p.conv, 8)?;
    let y = tape.conv2d(xq, w, 4, Padding::Same, 1)?;
    let y = batchnorm(tape, y, &p.bn1, mode)?;
    let y = dprelu(tape, y, &p.act1)?;
    let yq = q.acts(tape, y, 8, 1)?;
    let w = q.weights(tape, p.dw, 8)?;
    let y = tape.conv2d(yq, w, 1, Padding::Same, 32)?;
    let y = batchnorm(tape, y, &p.bn2, mode)?;
    dprelu(tape, y, &p.act2)
}
