//! Reverse-mode automatic differentiation over the primitive op set.
//!
//! Every op appends its output value to the tape together with what the
//! backward pass needs. [`Tape::backward`] walks the tape once in reverse.

use super::{NnError, Tensor};
use crate::graphir::Padding;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq)]
struct Window {
    k: [usize; 2],
    stride: usize,
    pads: [usize; 2],
    out: [usize; 2],
}

impl Window {
    fn new(input: [usize; 2], k: [usize; 2], stride: usize, padding: Padding) -> Result<Window, NnError> {
        if stride == 0 {
            return Err(NnError::Shape("stride must be positive".into()));
        }
        let ho = padding.output_size(input[0], k[0], stride);
        let wo = padding.output_size(input[1], k[1], stride);
        match (ho, wo) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(Window {
                k,
                stride,
                pads: [
                    padding.pad_before(input[0], k[0], stride),
                    padding.pad_before(input[1], k[1], stride),
                ],
                out: [ho, wo],
            }),
            _ => Err(NnError::Shape(format!("window {k:?} does not fit input {input:?}"))),
        }
    }

    /// Input coordinate of output `o` at tap `t` along axis `a`, if inside the input.
    #[inline]
    fn src(&self, a: usize, o: usize, t: usize, size: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pads[a] as isize;
        (i >= 0 && (i as usize) < size).then_some(i as usize)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, win: Window, groups: usize },
    Dense { x: Var, w: Var, b: Option<Var> },
    BatchNorm { x: Var, scale: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Dprelu { x: Var, p: [Var; 4] },
    Relu { x: Var },
    Hardsigmoid { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    PadChannels { x: Var },
    TileChannels { x: Var },
    AvgChannels { x: Var },
    AvgPool { x: Var, win: Window, divisor: f64 },
    MaxPool { x: Var, argmax: Vec<usize> },
    SpatialMean { x: Var },
    Ste { x: Var, mask: Vec<bool> },
    KlLoss { logits: Var, probs: Vec<f64>, targets: Vec<f64> },
}

/// Batch statistics observed by a training-mode BatchNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// How a BatchNorm obtains its normalization statistics.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    Batch,
    Running { mean: &'a [f64], var: &'a [f64] },
}

pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
}

/// Gradients indexed by [`Var`].
#[derive(Debug)]
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<(), NnError> {
    if a.shape != b.shape {
        return Err(NnError::Shape(format!("{what}: {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn channel_vec(t: &Tensor, c: usize, what: &str) -> Result<(), NnError> {
    if t.len() != c {
        return Err(NnError::ChannelMismatch {
            what: what.to_string(),
            expected: c,
            found: t.len(),
        });
    }
    Ok(())
}

/// Adaptive channel-average window `[start, end)` for output channel `i`.
pub fn avg_channel_window(i: usize, cin: usize, cout: usize) -> (usize, usize) {
    (i * cin / cout, ((i + 1) * cin).div_ceil(cout))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.needs_grad[v.0]);
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs);
        Var(self.values.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        self.ops.push(Op::Leaf);
        self.needs_grad.push(true);
        Var(self.values.len() - 1)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        self.ops.push(Op::Leaf);
        self.needs_grad.push(false);
        Var(self.values.len() - 1)
    }

    /// Grouped 2-D convolution; `w` is `[kh, kw, in/groups, out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding, groups: usize) -> Result<Var, NnError> {
        let (xs, ws) = (self.value(x).shape, self.value(w).shape);
        let [n, h, wd, cin] = xs;
        let [kh, kw, cig, cout] = ws;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cig {
            return Err(NnError::Shape(format!(
                "conv groups={groups}: input {xs:?} and weights {ws:?} disagree"
            )));
        }
        let win = Window::new([h, wd], [kh, kw], stride, padding)?;
        let [ho, wo] = win.out;
        let cog = cout / groups;
        let xv = &self.values[x.0].data;
        let wv = &self.values[w.0].data;
        let mut out = vec![0.0; n * ho * wo * cout];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let ob = ((b * ho + oy) * wo + ox) * cout;
                    let orow = &mut out[ob..ob + cout];
                    for ky in 0..kh {
                        let Some(iy) = win.src(0, oy, ky, h) else { continue };
                        for kx in 0..kw {
                            let Some(ix) = win.src(1, ox, kx, wd) else { continue };
                            let xb = ((b * h + iy) * wd + ix) * cin;
                            let wb = (ky * kw + kx) * cig;
                            for g in 0..groups {
                                let og = &mut orow[g * cog..(g + 1) * cog];
                                for ci in 0..cig {
                                    let a = xv[xb + g * cig + ci];
                                    if a == 0.0 {
                                        continue;
                                    }
                                    let wr = (wb + ci) * cout + g * cog;
                                    og.iter_mut().zip(&wv[wr..wr + cog]).for_each(|(o, &k)| *o += a * k);
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new([n, ho, wo, cout], out)?;
        Ok(self.push(value, Op::Conv { x, w, win, groups }, &[x, w]))
    }

    /// `y = x W + b` with `x` of shape `[N, 1, 1, in]` and `W` of shape `[1, 1, in, out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NnError> {
        let xs = self.value(x).shape;
        let [_, _, n_in, n_out] = self.value(w).shape;
        if xs[1] != 1 || xs[2] != 1 || xs[3] != n_in {
            return Err(NnError::Shape(format!("dense input {xs:?} vs {n_in} inputs")));
        }
        if let Some(b) = b {
            channel_vec(self.value(b), n_out, "dense bias")?;
        }
        let n = xs[0];
        let xv = &self.values[x.0].data;
        let wv = &self.values[w.0].data;
        let mut out = vec![0.0; n * n_out];
        for r in 0..n {
            let orow = &mut out[r * n_out..(r + 1) * n_out];
            if let Some(b) = b {
                orow.copy_from_slice(&self.values[b.0].data);
            }
            for i in 0..n_in {
                let a = xv[r * n_in + i];
                orow.iter_mut()
                    .zip(&wv[i * n_out..(i + 1) * n_out])
                    .for_each(|(o, &k)| *o += a * k);
            }
        }
        let value = Tensor::new([n, 1, 1, n_out], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Dense { x, w, b }, &inputs))
    }

    /// BatchNorm over `N, H, W`. In [`BnMode::Batch`] the biased batch statistics are returned.
    pub fn batchnorm(&mut self, x: Var, scale: Var, bias: Var, mode: BnMode) -> Result<(Var, Option<BatchStats>), NnError> {
        let c = self.value(x).channels();
        channel_vec(self.value(scale), c, "batchnorm scale")?;
        channel_vec(self.value(bias), c, "batchnorm bias")?;
        let xt = &self.values[x.0];
        let m = (xt.len() / c) as f64;
        let (mean, var, stats) = match mode {
            BnMode::Batch => {
                let mean: Vec<f64> = xt.channel_sums().iter().map(|s| s / m).collect();
                let mut var = vec![0.0; c];
                for row in xt.data.chunks_exact(c) {
                    for ((v, &x), &mu) in var.iter_mut().zip(row).zip(&mean) {
                        *v += (x - mu) * (x - mu);
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                (mean.clone(), var.clone(), Some(BatchStats { mean, var }))
            }
            BnMode::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(NnError::ChannelMismatch {
                        what: "batchnorm running statistics".into(),
                        expected: c,
                        found: mean.len().min(var.len()),
                    });
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let (sv, bv) = (&self.values[scale.0].data, &self.values[bias.0].data);
        let mut xhat = Vec::with_capacity(xt.len());
        let mut out = Vec::with_capacity(xt.len());
        for row in xt.data.chunks_exact(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(sv[ch] * h + bv[ch]);
            }
        }
        let value = Tensor::new(xt.shape, out)?;
        let op = Op::BatchNorm {
            x,
            scale,
            bias,
            xhat,
            inv_std,
            batch_stats: stats.is_some(),
        };
        Ok((self.push(value, op, &[x, scale, bias]), stats))
    }

    /// `η(x−α)−β` where `x−α > 0`, `γ(x−α)−β` otherwise, per channel.
    pub fn dprelu(&mut self, x: Var, alpha: Var, beta: Var, gamma: Var, eta: Var) -> Result<Var, NnError> {
        let c = self.value(x).channels();
        for (v, name) in [(alpha, "alpha"), (beta, "beta"), (gamma, "gamma"), (eta, "eta")] {
            channel_vec(self.value(v), c, &format!("dprelu {name}"))?;
        }
        let [a, b, g, e] = [alpha, beta, gamma, eta].map(|v| &self.values[v.0].data);
        let xt = &self.values[x.0];
        let mut out = Vec::with_capacity(xt.len());
        for row in xt.data.chunks_exact(c) {
            for ch in 0..c {
                let z = row[ch] - a[ch];
                out.push(if z > 0.0 { e[ch] * z } else { g[ch] * z } - b[ch]);
            }
        }
        let value = Tensor::new(xt.shape, out)?;
        let p = [alpha, beta, gamma, eta];
        Ok(self.push(value, Op::Dprelu { x, p }, &[x, alpha, beta, gamma, eta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu { x }, &[x])
    }

    /// `ReLU6(x + 3) / 6`.
    pub fn hardsigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| (v + 3.0).clamp(0.0, 6.0) / 6.0);
        self.push(value, Op::Hardsigmoid { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (at, bt) = (self.value(a), self.value(b));
        same_shape(at, bt, "add")?;
        let data = at.data.iter().zip(&bt.data).map(|(x, y)| x + y).collect();
        let value = Tensor::new(at.shape, data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product; `b` may also be `[N, 1, 1, C]`, broadcast over `H, W`.
    pub fn multiply(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (at, bt) = (self.value(a), self.value(b));
        let [n, _, _, c] = at.shape;
        let data: Vec<f64> = if at.shape == bt.shape {
            at.data.iter().zip(&bt.data).map(|(x, y)| x * y).collect()
        } else if bt.shape == [n, 1, 1, c] {
            let per = at.item_len();
            at.data
                .iter()
                .enumerate()
                .map(|(i, x)| x * bt.data[(i / per) * c + i % c])
                .collect()
        } else {
            return Err(NnError::Shape(format!("multiply {:?} by {:?}", at.shape, bt.shape)));
        };
        let value = Tensor::new(at.shape, data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    fn remap_channels(&mut self, x: Var, out: usize, f: impl Fn(&[f64], &mut [f64]), op: Op) -> Var {
        let xt = self.value(x);
        let c = xt.channels();
        let mut data = vec![0.0; xt.len() / c * out];
        for (src, dst) in xt.data.chunks_exact(c).zip(data.chunks_exact_mut(out)) {
            f(src, dst);
        }
        let [n, h, w, _] = xt.shape;
        let value = Tensor { shape: [n, h, w, out], data };
        self.push(value, op, &[x])
    }

    /// Zero-fill channels `c..out`.
    pub fn pad_channels(&mut self, x: Var, out: usize) -> Result<Var, NnError> {
        let c = self.value(x).channels();
        if out < c {
            return Err(NnError::Shape(format!("pad {c} channels to {out}")));
        }
        Ok(self.remap_channels(x, out, |s, d| d[..s.len()].copy_from_slice(s), Op::PadChannels { x }))
    }

    /// Output channel `i` copies input channel `i mod c`.
    pub fn tile_channels(&mut self, x: Var, out: usize) -> Result<Var, NnError> {
        let c = self.value(x).channels();
        if out < c {
            return Err(NnError::Shape(format!("tile {c} channels to {out}")));
        }
        Ok(self.remap_channels(
            x,
            out,
            |s, d| d.iter_mut().enumerate().for_each(|(i, v)| *v = s[i % s.len()]),
            Op::TileChannels { x },
        ))
    }

    /// Output channel `i` averages the input channels of [`avg_channel_window`].
    pub fn avg_channels(&mut self, x: Var, out: usize) -> Result<Var, NnError> {
        let c = self.value(x).channels();
        if out == 0 || out > c {
            return Err(NnError::Shape(format!("average {c} channels down to {out}")));
        }
        Ok(self.remap_channels(
            x,
            out,
            |s, d| {
                for (i, v) in d.iter_mut().enumerate() {
                    let (lo, hi) = avg_channel_window(i, s.len(), out);
                    *v = s[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
                }
            },
            Op::AvgChannels { x },
        ))
    }

    /// Average pool with a fixed divisor (padding taps count as zeros).
    pub fn avg_pool(&mut self, x: Var, k: usize, stride: usize, padding: Padding, divisor: f64) -> Result<Var, NnError> {
        let xt = self.value(x);
        let [n, h, w, c] = xt.shape;
        let win = Window::new([h, w], [k, k], stride, padding)?;
        let [ho, wo] = win.out;
        let mut out = vec![0.0; n * ho * wo * c];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let ob = ((b * ho + oy) * wo + ox) * c;
                    for ky in 0..k {
                        let Some(iy) = win.src(0, oy, ky, h) else { continue };
                        for kx in 0..k {
                            let Some(ix) = win.src(1, ox, kx, w) else { continue };
                            let ib = ((b * h + iy) * w + ix) * c;
                            for ch in 0..c {
                                out[ob + ch] += xt.data[ib + ch];
                            }
                        }
                    }
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= divisor);
        let value = Tensor::new([n, ho, wo, c], out)?;
        Ok(self.push(value, Op::AvgPool { x, win, divisor }, &[x]))
    }

    /// Max pool; padding taps never win.
    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize, padding: Padding) -> Result<Var, NnError> {
        let xt = self.value(x);
        let [n, h, w, c] = xt.shape;
        let win = Window::new([h, w], [k, k], stride, padding)?;
        let [ho, wo] = win.out;
        let mut out = vec![f64::NEG_INFINITY; n * ho * wo * c];
        let mut argmax = vec![0usize; out.len()];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let ob = ((b * ho + oy) * wo + ox) * c;
                    for ky in 0..k {
                        let Some(iy) = win.src(0, oy, ky, h) else { continue };
                        for kx in 0..k {
                            let Some(ix) = win.src(1, ox, kx, w) else { continue };
                            let ib = ((b * h + iy) * w + ix) * c;
                            for ch in 0..c {
                                if xt.data[ib + ch] > out[ob + ch] {
                                    out[ob + ch] = xt.data[ib + ch];
                                    argmax[ob + ch] = ib + ch;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new([n, ho, wo, c], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Mean over `H, W`, giving `[N, 1, 1, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let [n, h, w, c] = xt.shape;
        let hw = (h * w) as f64;
        let mut out = vec![0.0; n * c];
        for (b, item) in xt.data.chunks_exact(h * w * c).enumerate() {
            for row in item.chunks_exact(c) {
                out[b * c..(b + 1) * c].iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
        }
        out.iter_mut().for_each(|v| *v /= hw);
        self.push(Tensor { shape: [n, 1, 1, c], data: out }, Op::SpatialMean { x }, &[x])
    }

    /// Records `value` as a function of `x` whose gradient is `upstream * mask`.
    ///
    /// This is the straight-through estimator used by every quantizer.
    pub fn straight_through(&mut self, x: Var, value: Tensor, mask: Vec<bool>) -> Result<Var, NnError> {
        same_shape(self.value(x), &value, "straight-through value")?;
        if mask.len() != value.len() {
            return Err(NnError::Shape(format!("mask of {} for {} values", mask.len(), value.len())));
        }
        Ok(self.push(value, Op::Ste { x, mask }, &[x]))
    }

    /// Mean over the batch of `KL(targets ‖ softmax(logits))`; a scalar.
    pub fn kl_loss(&mut self, logits: Var, targets: &Tensor) -> Result<Var, NnError> {
        let lt = self.value(logits);
        same_shape(lt, targets, "kl loss targets")?;
        let k = lt.channels();
        let n = lt.len() / k;
        let mut probs = Vec::with_capacity(lt.len());
        let mut loss = 0.0;
        for (row, trow) in lt.data.chunks_exact(k).zip(targets.data.chunks_exact(k)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (&z, &t) in row.iter().zip(trow) {
                probs.push((z - lse).exp());
                if t > 0.0 {
                    loss += t * (t.ln() - (z - lse));
                }
            }
        }
        let value = Tensor::scalar(loss / n as f64);
        let op = Op::KlLoss {
            logits,
            probs,
            targets: targets.data.clone(),
        };
        Ok(self.push(value, op, &[logits]))
    }

    /// Gradients of the scalar `out` with respect to every recorded value.
    pub fn backward(&self, out: Var) -> Result<Grads, NnError> {
        let v = self.value(out);
        if v.len() != 1 {
            return Err(NnError::Shape(format!("backward from non-scalar {:?}", v.shape)));
        }
        if !v.data[0].is_finite() {
            return Err(NnError::NonFinite(format!("loss is {}", v.data[0])));
        }
        self.backward_with(out, Tensor::full(v.shape, 1.0))
    }

    /// Backward pass seeded with an arbitrary upstream gradient for `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Grads, NnError> {
        same_shape(self.value(out), &seed, "backward seed")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Grads(grads))
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs_grad[v.0] {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.values[v.0].shape));
        f(&mut slot.data);
    }

    fn backprop(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let dyv = &dy.data;
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Conv { x, w, win, groups } => self.conv_backward(*x, *w, win, *groups, dy, grads),
            Op::Dense { x, w, b } => {
                let xv = &self.values[x.0].data;
                let wv = &self.values[w.0].data;
                let [_, _, n_in, n_out] = self.values[w.0].shape;
                let n = xv.len() / n_in;
                self.acc(grads, *x, |dx| {
                    for r in 0..n {
                        let g = &dyv[r * n_out..(r + 1) * n_out];
                        for j in 0..n_in {
                            dx[r * n_in + j] += dot(&wv[j * n_out..(j + 1) * n_out], g);
                        }
                    }
                });
                self.acc(grads, *w, |dw| {
                    for r in 0..n {
                        let g = &dyv[r * n_out..(r + 1) * n_out];
                        for j in 0..n_in {
                            let a = xv[r * n_in + j];
                            dw[j * n_out..(j + 1) * n_out].iter_mut().zip(g).for_each(|(d, &gg)| *d += a * gg);
                        }
                    }
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |db| {
                        for g in dyv.chunks_exact(n_out) {
                            db.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                        }
                    });
                }
            }
            Op::BatchNorm {
                x,
                scale,
                bias,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let m = (xhat.len() / c) as f64;
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (g, h) in dyv.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        sum_dy[ch] += g[ch];
                        sum_dy_xhat[ch] += g[ch] * h[ch];
                    }
                }
                let sv = &self.values[scale.0].data;
                self.acc(grads, *x, |dx| {
                    for ((d, g), h) in dx.chunks_exact_mut(c).zip(dyv.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            let k = sv[ch] * inv_std[ch];
                            d[ch] += if *batch_stats {
                                k * (g[ch] - sum_dy[ch] / m - h[ch] * sum_dy_xhat[ch] / m)
                            } else {
                                k * g[ch]
                            };
                        }
                    }
                });
                self.acc(grads, *scale, |d| d.iter_mut().zip(&sum_dy_xhat).for_each(|(a, b)| *a += b));
                self.acc(grads, *bias, |d| d.iter_mut().zip(&sum_dy).for_each(|(a, b)| *a += b));
            }
            Op::Dprelu { x, p } => {
                let c = self.values[x.0].channels();
                let [a, _, g, e] = p.map(|v| &self.values[v.0].data);
                let xv = &self.values[x.0].data;
                let mut dp = [vec![0.0; c], vec![0.0; c], vec![0.0; c], vec![0.0; c]];
                let mut dx = vec![0.0; xv.len()];
                for (idx, (&xi, &gi)) in xv.iter().zip(dyv).enumerate() {
                    let ch = idx % c;
                    let z = xi - a[ch];
                    let slope = if z > 0.0 { e[ch] } else { g[ch] };
                    dx[idx] = gi * slope;
                    dp[0][ch] -= gi * slope;
                    dp[1][ch] -= gi;
                    if z > 0.0 {
                        dp[3][ch] += gi * z;
                    } else {
                        dp[2][ch] += gi * z;
                    }
                }
                self.acc(grads, *x, |d| add_into(d, &dx));
                for (v, g) in p.iter().zip(&dp) {
                    self.acc(grads, *v, |d| add_into(d, g));
                }
            }
            Op::Relu { x } => {
                let xv = &self.values[x.0].data;
                self.acc(grads, *x, |d| {
                    for ((d, &xi), &g) in d.iter_mut().zip(xv).zip(dyv) {
                        if xi > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Hardsigmoid { x } => {
                let xv = &self.values[x.0].data;
                self.acc(grads, *x, |d| {
                    for ((d, &xi), &g) in d.iter_mut().zip(xv).zip(dyv) {
                        if xi > -3.0 && xi < 3.0 {
                            *d += g / 6.0;
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, |d| add_into(d, dyv));
                self.acc(grads, *b, |d| add_into(d, dyv));
            }
            Op::Mul { a, b } => {
                let (at, bt) = (&self.values[a.0], &self.values[b.0]);
                if at.shape == bt.shape {
                    self.acc(grads, *a, |d| {
                        d.iter_mut().zip(dyv).zip(&bt.data).for_each(|((d, g), y)| *d += g * y)
                    });
                    self.acc(grads, *b, |d| {
                        d.iter_mut().zip(dyv).zip(&at.data).for_each(|((d, g), x)| *d += g * x)
                    });
                } else {
                    let c = at.channels();
                    let per = at.item_len();
                    self.acc(grads, *a, |d| {
                        for (i, (d, g)) in d.iter_mut().zip(dyv).enumerate() {
                            *d += g * bt.data[(i / per) * c + i % c];
                        }
                    });
                    self.acc(grads, *b, |d| {
                        for (i, (g, x)) in dyv.iter().zip(&at.data).enumerate() {
                            d[(i / per) * c + i % c] += g * x;
                        }
                    });
                }
            }
            Op::PadChannels { x } => {
                let c = self.values[x.0].channels();
                let co = dy.channels();
                self.acc(grads, *x, |d| {
                    for (d, g) in d.chunks_exact_mut(c).zip(dyv.chunks_exact(co)) {
                        add_into(d, &g[..c]);
                    }
                });
            }
            Op::TileChannels { x } => {
                let c = self.values[x.0].channels();
                let co = dy.channels();
                self.acc(grads, *x, |d| {
                    for (d, g) in d.chunks_exact_mut(c).zip(dyv.chunks_exact(co)) {
                        for (j, gv) in g.iter().enumerate() {
                            d[j % c] += gv;
                        }
                    }
                });
            }
            Op::AvgChannels { x } => {
                let c = self.values[x.0].channels();
                let co = dy.channels();
                self.acc(grads, *x, |d| {
                    for (d, g) in d.chunks_exact_mut(c).zip(dyv.chunks_exact(co)) {
                        for (j, gv) in g.iter().enumerate() {
                            let (lo, hi) = avg_channel_window(j, c, co);
                            let share = gv / (hi - lo) as f64;
                            d[lo..hi].iter_mut().for_each(|v| *v += share);
                        }
                    }
                });
            }
            Op::AvgPool { x, win, divisor } => {
                let [n, h, w, c] = self.values[x.0].shape;
                let [ho, wo] = win.out;
                self.acc(grads, *x, |d| {
                    for b in 0..n {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let ob = ((b * ho + oy) * wo + ox) * c;
                                for ky in 0..win.k[0] {
                                    let Some(iy) = win.src(0, oy, ky, h) else { continue };
                                    for kx in 0..win.k[1] {
                                        let Some(ix) = win.src(1, ox, kx, w) else { continue };
                                        let ib = ((b * h + iy) * w + ix) * c;
                                        for ch in 0..c {
                                            d[ib + ch] += dyv[ob + ch] / divisor;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                self.acc(grads, *x, |d| {
                    for (&src, g) in argmax.iter().zip(dyv) {
                        d[src] += g;
                    }
                });
            }
            Op::SpatialMean { x } => {
                let [_, h, w, c] = self.values[x.0].shape;
                let hw = (h * w) as f64;
                self.acc(grads, *x, |d| {
                    for (b, item) in d.chunks_exact_mut(h * w * c).enumerate() {
                        let g = &dyv[b * c..(b + 1) * c];
                        for row in item.chunks_exact_mut(c) {
                            row.iter_mut().zip(g).for_each(|(r, gv)| *r += gv / hw);
                        }
                    }
                });
            }
            Op::Ste { x, mask } => {
                self.acc(grads, *x, |d| {
                    for ((d, &g), &m) in d.iter_mut().zip(dyv).zip(mask) {
                        if m {
                            *d += g;
                        }
                    }
                });
            }
            Op::KlLoss { logits, probs, targets } => {
                let k = self.values[logits.0].channels();
                let n = (probs.len() / k) as f64;
                let g = dyv[0] / n;
                self.acc(grads, *logits, |d| {
                    for ((d, p), t) in d.iter_mut().zip(probs).zip(targets) {
                        *d += g * (p - t);
                    }
                });
            }
        }
    }

    fn conv_backward(&self, x: Var, w: Var, win: &Window, groups: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let [n, h, wd, cin] = self.values[x.0].shape;
        let [kh, kw, cig, cout] = self.values[w.0].shape;
        let [ho, wo] = win.out;
        let cog = cout / groups;
        let xv = &self.values[x.0].data;
        let wv = &self.values[w.0].data;
        let dyv = &dy.data;
        let visit = |f: &mut dyn FnMut(usize, usize, usize)| {
            for b in 0..n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let ob = ((b * ho + oy) * wo + ox) * cout;
                        for ky in 0..kh {
                            let Some(iy) = win.src(0, oy, ky, h) else { continue };
                            for kx in 0..kw {
                                let Some(ix) = win.src(1, ox, kx, wd) else { continue };
                                f(ob, ((b * h + iy) * wd + ix) * cin, (ky * kw + kx) * cig);
                            }
                        }
                    }
                }
            }
        };
        self.acc(grads, x, |dx| {
            visit(&mut |ob, xb, wb| {
                for g in 0..groups {
                    let gy = &dyv[ob + g * cog..ob + (g + 1) * cog];
                    for ci in 0..cig {
                        let wr = (wb + ci) * cout + g * cog;
                        dx[xb + g * cig + ci] += dot(&wv[wr..wr + cog], gy);
                    }
                }
            })
        });
        self.acc(grads, w, |dw| {
            visit(&mut |ob, xb, wb| {
                for g in 0..groups {
                    let gy = &dyv[ob + g * cog..ob + (g + 1) * cog];
                    for ci in 0..cig {
                        let a = xv[xb + g * cig + ci];
                        if a == 0.0 {
                            continue;
                        }
                        let wr = (wb + ci) * cout + g * cog;
                        dw[wr..wr + cog].iter_mut().zip(gy).for_each(|(d, &gv)| *d += a * gv);
                    }
                }
            })
        });
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn add_into(d: &mut [f64], s: &[f64]) {
    d.iter_mut().zip(s).for_each(|(a, b)| *a += b);
}
