//! Casting, fake quantization and binarization.
//!
//! Forward passes map reals onto a symmetric integer grid scaled by a bound
//! `B`; backward passes are straight-through: rounding has unit derivative and
//! clipping gates the gradient to the open interval `(-B, B)`.
//!
//! Rounding is half-away-from-zero (`f64::round`), `sign(0) = +1`, and the
//! default epsilon is `2^-10`.

use thiserror::Error;

/// Default guard band keeping rounded values inside the grid.
pub const DEFAULT_EPSILON: f64 = 1.0 / 1024.0;
/// Default EMA coefficient of the activation bound calibration.
pub const DEFAULT_EMA_ALPHA: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantError {
    #[error("clip bounds inverted: lo={lo} > hi={hi}")]
    InvertedBounds { lo: f64, hi: f64 },
    #[error("quantization bound must be positive, got {0}")]
    NonPositiveBound(f64),
    #[error("bitwidth {0} not supported here")]
    Bits(u32),
    #[error("cannot calibrate on an empty batch")]
    EmptyBatch,
    #[error("invalid quantizer config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub fn clip(x: f64, lo: f64, hi: f64) -> Result<f64, QuantError> {
    if lo > hi {
        return Err(QuantError::InvertedBounds { lo, hi });
    }
    Ok(hi.min(lo.max(x)))
}

/// Derivative of [`clip`]: 1 strictly inside `(lo, hi)`, 0 elsewhere.
pub fn clip_grad(x: f64, lo: f64, hi: f64) -> f64 {
    if x > lo && x < hi {
        1.0
    } else {
        0.0
    }
}

/// End point `C_b = 2^(b-1) - 0.5` of the signed grid.
pub fn grid_end(bits: u32) -> f64 {
    2f64.powi(bits as i32 - 1) - 0.5
}

/// Largest magnitude produced by a signed `bits`-wide cast.
pub fn max_level(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// `round(clip(x, -C_b + eps, C_b - eps))`.
pub fn int_b(x: f64, bits: u32, eps: f64) -> f64 {
    let c = grid_end(bits);
    (c - eps).min((eps - c).max(x)).round()
}

/// `floor(clip(x, 0, 2^b - eps))`.
pub fn uint_b(x: f64, bits: u32, eps: f64) -> f64 {
    let top = 2f64.powi(bits as i32) - eps;
    top.min(0f64.max(x)).floor()
}

/// Symmetric fake quantizer with bound `B` and `bits >= 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FakeQuant {
    pub bits: u32,
    pub bound: f64,
    pub eps: f64,
    scale: f64,
    inv_scale: f64,
}

impl FakeQuant {
    pub fn new(bits: u32, bound: f64) -> Result<Self, QuantError> {
        Self::with_epsilon(bits, bound, DEFAULT_EPSILON)
    }

    pub fn with_epsilon(bits: u32, bound: f64, eps: f64) -> Result<Self, QuantError> {
        if bits < 2 || bits > 31 {
            return Err(QuantError::Bits(bits));
        }
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(QuantError::NonPositiveBound(bound));
        }
        if !(eps > 0.0 && eps < 0.5) {
            return Err(QuantError::Config(format!("epsilon {eps} outside (0, 0.5)")));
        }
        let c = grid_end(bits);
        Ok(FakeQuant {
            bits,
            bound,
            eps,
            scale: c / bound,
            inv_scale: bound / c,
        })
    }

    /// Integer grid level of `x`.
    pub fn level(&self, x: f64) -> f64 {
        int_b(x * self.scale, self.bits, self.eps)
    }

    pub fn forward(&self, x: f64) -> f64 {
        self.level(x) * self.inv_scale
    }

    /// Straight-through derivative `1_{x in (-B, B)}`.
    pub fn grad(&self, x: f64) -> f64 {
        ste_indicator(x, self.bound)
    }

    /// The quantizer with rounding removed; smooth away from the clip points.
    pub fn surrogate(&self, x: f64) -> f64 {
        let c = grid_end(self.bits);
        (c - self.eps).min((self.eps - c).max(x * self.scale)) * self.inv_scale
    }

    /// Dequantization step `B / C_b`.
    pub fn step(&self) -> f64 {
        self.inv_scale
    }
}

pub fn ste_indicator(x: f64, bound: f64) -> f64 {
    if x > -bound && x < bound {
        1.0
    } else {
        0.0
    }
}

/// `Q_b(x) = int_b(x * C_b / B) * B / C_b`, elementwise.
pub fn fake_quant(x: &[f64], bound: f64, bits: u32) -> Result<Vec<f64>, QuantError> {
    let q = FakeQuant::new(bits, bound)?;
    Ok(x.iter().map(|&v| q.forward(v)).collect())
}

/// Backward of [`fake_quant`] given upstream gradients.
pub fn fake_quant_backward(x: &[f64], upstream: &[f64], bound: f64) -> Vec<f64> {
    x.iter().zip(upstream).map(|(&v, &g)| g * ste_indicator(v, bound)).collect()
}

/// `sign(x)` with `sign(0) = +1`.
pub fn sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Binarization forward; independent of the bound.
pub fn binarize(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sign(v)).collect()
}

/// Binarization gradient, which does depend on the bound.
pub fn binarize_grad(x: f64, bound: f64) -> f64 {
    ste_indicator(x, bound)
}

/// How a quantizer obtains its bound.
#[derive(Debug, Clone, PartialEq)]
pub enum BoundMode {
    Fixed(f64),
    Ema { alpha: f64 },
    WeightPerChannel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantConfig {
    pub bits: u32,
    pub signed: bool,
    pub bound_mode: BoundMode,
    pub epsilon: f64,
}

impl QuantConfig {
    pub fn validate(&self) -> Result<(), QuantError> {
        if self.bits == 0 || self.bits > 31 {
            return Err(QuantError::Bits(self.bits));
        }
        if self.signed && self.bits < 2 && self.bound_mode != BoundMode::WeightPerChannel {
            // 1-bit signed quantizers are binarizers; they only need a fixed gradient bound.
            if !matches!(self.bound_mode, BoundMode::Fixed(_)) {
                return Err(QuantError::Config("binary activations use a fixed bound".into()));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(QuantError::Config(format!("epsilon {} outside (0, 0.5)", self.epsilon)));
        }
        match self.bound_mode {
            BoundMode::Fixed(b) if !(b > 0.0) => Err(QuantError::NonPositiveBound(b)),
            BoundMode::Ema { alpha } if !(alpha > 0.0 && alpha < 1.0) => {
                Err(QuantError::Config(format!("EMA alpha {alpha} outside (0, 1)")))
            }
            _ => Ok(()),
        }
    }
}

/// Calibration state of an activation quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundState {
    pub bound: f64,
    pub frozen: bool,
    pub ema_alpha: f64,
    /// Whether at least one batch has been observed.
    pub initialized: bool,
}

impl BoundState {
    pub fn new(initial: f64, ema_alpha: f64) -> Self {
        BoundState {
            bound: initial,
            frozen: false,
            ema_alpha,
            initialized: true,
        }
    }

    /// A state whose first observation replaces the placeholder bound.
    pub fn uninitialized(ema_alpha: f64) -> Self {
        BoundState {
            bound: 1.0,
            frozen: false,
            ema_alpha,
            initialized: false,
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }
}

/// `B <- alpha * B + (1 - alpha) * max|batch|`; frozen states are returned unchanged.
pub fn update_ema_bound(s: &BoundState, batch: &[f64]) -> Result<BoundState, QuantError> {
    if s.frozen {
        return Ok(s.clone());
    }
    if batch.is_empty() {
        return Err(QuantError::EmptyBatch);
    }
    let m = batch.iter().fold(0f64, |acc, v| acc.max(v.abs()));
    let mut next = s.clone();
    next.bound = if s.initialized {
        s.ema_alpha * s.bound + (1.0 - s.ema_alpha) * m
    } else {
        m
    };
    next.initialized = true;
    Ok(next)
}

/// Per-output-channel bounds `B_o = max |w|` over every other axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelBounds {
    pub bounds: Vec<f64>,
    /// Channels whose weights were all zero; their bound was replaced by epsilon.
    pub zero_channels: Vec<usize>,
}

/// Reduces `w` (row-major, `shape`) to one bound per index of `out_axis`.
pub fn weight_channel_bounds(w: &[f64], shape: &[usize], out_axis: usize) -> Result<ChannelBounds, QuantError> {
    if w.is_empty() {
        return Err(QuantError::EmptyBatch);
    }
    if out_axis >= shape.len() || shape.iter().product::<usize>() != w.len() {
        return Err(QuantError::Shape(format!("axis {out_axis} of shape {shape:?} for {} values", w.len())));
    }
    let n_out = shape[out_axis];
    let inner: usize = shape[out_axis + 1..].iter().product();
    let mut bounds = vec![0f64; n_out];
    for (i, v) in w.iter().enumerate() {
        let o = (i / inner) % n_out;
        bounds[o] = bounds[o].max(v.abs());
    }
    let mut zero_channels = Vec::new();
    for (o, b) in bounds.iter_mut().enumerate() {
        if *b == 0.0 {
            *b = DEFAULT_EPSILON;
            zero_channels.push(o);
        }
    }
    Ok(ChannelBounds { bounds, zero_channels })
}
