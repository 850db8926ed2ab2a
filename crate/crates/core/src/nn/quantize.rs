//! Quantizers recorded on a [`Tape`] as straight-through ops.

use super::{NnError, Tape, Tensor, Var};
use crate::quant::{sign, FakeQuant};

/// Bound shared by a whole tensor or one per last-axis index.
#[derive(Debug, Clone, PartialEq)]
pub enum Bounds {
    PerTensor(f64),
    PerChannel(Vec<f64>),
}

impl Bounds {
    fn at(&self, i: usize) -> f64 {
        match self {
            Bounds::PerTensor(b) => *b,
            Bounds::PerChannel(v) => v[i % v.len()],
        }
    }

    fn check(&self, t: &Tensor) -> Result<(), NnError> {
        match self {
            Bounds::PerChannel(v) if v.len() != t.channels() => Err(NnError::ChannelMismatch {
                what: "quantizer bounds".into(),
                expected: t.channels(),
                found: v.len(),
            }),
            _ => Ok(()),
        }
    }
}

/// Per-channel `max |w|` over every axis but the last, with zero replaced by `eps`.
pub fn weight_bounds(w: &Tensor, eps: f64) -> Vec<f64> {
    let mut b = vec![0.0f64; w.channels()];
    for row in w.data.chunks_exact(w.channels()) {
        b.iter_mut().zip(row).for_each(|(m, v)| *m = m.max(v.abs()));
    }
    b.iter().map(|&v| if v == 0.0 { eps } else { v }).collect()
}

/// Which function stands in for the rounding quantizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuantForm {
    /// `sign` and round-to-grid.
    #[default]
    Exact,
    /// Clipping only (`clip(x, -B, B)` for sign, unrounded grid for fake quant):
    /// differentiable almost everywhere with derivative equal to the STE gradient.
    Surrogate,
}

/// STE pass-through region. The surrogate also passes at `|x| = B`, where
/// per-channel weight bounds sit and the clipped surrogate has slope one.
fn inside(x: f64, bound: f64, form: QuantForm) -> bool {
    match form {
        QuantForm::Exact => x.abs() < bound,
        QuantForm::Surrogate => x.abs() <= bound,
    }
}

/// `sign(x)` forward, `1_{|x| < B}` backward.
pub fn binarize(tape: &mut Tape, x: Var, grad_bound: &Bounds, form: QuantForm) -> Result<Var, NnError> {
    let t = tape.value(x);
    grad_bound.check(t)?;
    let mask: Vec<bool> = t
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| inside(v, grad_bound.at(i), form))
        .collect();
    let value = match form {
        QuantForm::Exact => t.map(sign),
        QuantForm::Surrogate => {
            let mut out = t.clone();
            out.data
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = v.clamp(-grad_bound.at(i), grad_bound.at(i)));
            out
        }
    };
    tape.straight_through(x, value, mask)
}

/// Signed `bits`-bit fake quantization with straight-through gradient.
pub fn fake_quant(tape: &mut Tape, x: Var, bits: u32, bounds: &Bounds, eps: f64, form: QuantForm) -> Result<Var, NnError> {
    let t = tape.value(x);
    bounds.check(t)?;
    let quantizers: Vec<FakeQuant> = match bounds {
        Bounds::PerTensor(b) => vec![FakeQuant::with_epsilon(bits, *b, eps)?],
        Bounds::PerChannel(v) => v
            .iter()
            .map(|&b| FakeQuant::with_epsilon(bits, b, eps))
            .collect::<Result<_, _>>()?,
    };
    let q = |i: usize| &quantizers[i % quantizers.len()];
    let mut value = t.clone();
    let mut mask = Vec::with_capacity(t.len());
    for (i, v) in value.data.iter_mut().enumerate() {
        mask.push(inside(*v, q(i).bound, form));
        *v = match form {
            QuantForm::Exact => q(i).forward(*v),
            QuantForm::Surrogate => q(i).surrogate(*v),
        };
    }
    tape.straight_through(x, value, mask)
}
