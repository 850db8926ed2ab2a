//! Integer convolution and dense kernels.
//!
//! Accumulation is exact in `i32`. For the supported shapes the largest
//! magnitude is bounded by the kernel volume times the product of the maximal
//! levels: the 8-bit stem conv peaks at `4*4*3*127*127 = 774_192` and the
//! 8-bit classifier at `2048*127*127 ≈ 3.3e7`, far below `2^31`. Overflow is
//! still checked and reported rather than wrapped.

use super::{conv_out_dims, Accumulator, ConvGeometry, KernelError};
use crate::graphir::DType;
use crate::quant::{max_level, FakeQuant};

/// Dequantization factor of an integer tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Scale {
    PerTensor(f64),
    /// One factor per index of the last axis.
    PerChannel(Vec<f64>),
}

impl Scale {
    pub fn at(&self, channel: usize) -> f64 {
        match self {
            Scale::PerTensor(s) => *s,
            Scale::PerChannel(v) => v[channel],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub values: Vec<i32>,
    pub bits: DType,
    pub signed: bool,
    pub scale: Scale,
}

impl IntTensor {
    /// Signed tensor; every value must lie within `±(2^(bits-1) - 1)`.
    pub fn signed(shape: Vec<usize>, values: Vec<i32>, bits: DType, scale: Scale) -> Result<Self, KernelError> {
        check_len(&shape, values.len())?;
        if bits.is_float() {
            return Err(KernelError::Bits(bits));
        }
        let lim = if bits == DType::Binary { 1 } else { max_level(bits.bits()) };
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| (v.abs() as i64) > lim) {
            return Err(KernelError::Range { index, value, bits });
        }
        Ok(IntTensor {
            shape,
            values,
            bits,
            signed: true,
            scale,
        })
    }

    /// Unsigned tensor with values in `[0, 2^bits - 1]`.
    pub fn unsigned(shape: Vec<usize>, values: Vec<i32>, bits: DType) -> Result<Self, KernelError> {
        check_len(&shape, values.len())?;
        if bits.is_float() {
            return Err(KernelError::Bits(bits));
        }
        let top = (1i64 << bits.bits()) - 1;
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, &v)| v as i64 > top) {
            return Err(KernelError::Range { index, value, bits });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, &v)| v < 0) {
            return Err(KernelError::SignedInput { index, value });
        }
        Ok(IntTensor {
            shape,
            values,
            bits,
            signed: false,
            scale: Scale::PerTensor(1.0),
        })
    }

    /// Quantize reals with a per-tensor fake quantizer, keeping the integer levels.
    pub fn quantize(x: &[f64], shape: Vec<usize>, q: &FakeQuant, bits: DType) -> Result<Self, KernelError> {
        let values = x.iter().map(|&v| q.level(v) as i32).collect();
        IntTensor::signed(shape, values, bits, Scale::PerTensor(q.step()))
    }

    /// Quantize HWIO / `[in, out]` weights with one bound per output channel (last axis).
    pub fn quantize_per_channel(w: &[f64], shape: Vec<usize>, bounds: &[f64], bits: DType) -> Result<Self, KernelError> {
        let out = *shape.last().unwrap_or(&0);
        if bounds.len() != out {
            return Err(KernelError::LengthMismatch(bounds.len(), out));
        }
        let qs: Vec<FakeQuant> = bounds
            .iter()
            .map(|&b| FakeQuant::new(bits.bits(), b).map_err(|_| KernelError::Bits(bits)))
            .collect::<Result<_, _>>()?;
        let values = w.iter().enumerate().map(|(i, &v)| qs[i % out].level(v) as i32).collect();
        let scale = Scale::PerChannel(qs.iter().map(|q| q.step()).collect());
        IntTensor::signed(shape, values, bits, scale)
    }

    /// Real values `level * scale`.
    pub fn dequantize(&self) -> Vec<f64> {
        let c = *self.shape.last().unwrap_or(&1);
        self.values
            .iter()
            .enumerate()
            .map(|(i, &v)| v as f64 * self.scale.at(i % c))
            .collect()
    }
}

fn check_len(shape: &[usize], n: usize) -> Result<(), KernelError> {
    if shape.iter().product::<usize>() != n {
        return Err(KernelError::Shape(format!("{n} values for shape {shape:?}")));
    }
    Ok(())
}

fn check_bits(t: &IntTensor) -> Result<(), KernelError> {
    match t.bits {
        DType::Int8 | DType::Int4 => Ok(()),
        other => Err(KernelError::Bits(other)),
    }
}

fn per_tensor_scale(t: &IntTensor) -> Result<f64, KernelError> {
    match t.scale {
        Scale::PerTensor(s) => Ok(s),
        Scale::PerChannel(_) => Err(KernelError::Shape("activations need a per-tensor scale".into())),
    }
}

/// Integer grouped convolution; `act` is `[H, W, C]`, `w` is HWIO.
pub fn int_conv2d(act: &IntTensor, w: &IntTensor, geom: ConvGeometry) -> Result<Accumulator, KernelError> {
    check_bits(act)?;
    check_bits(w)?;
    let (&[h, wd, cin], &[kh, kw, cig, cout]) = (
        <&[usize; 3]>::try_from(act.shape.as_slice()).map_err(|_| KernelError::Shape("activation must be HWC".into()))?,
        <&[usize; 4]>::try_from(w.shape.as_slice()).map_err(|_| KernelError::Shape("weights must be HWIO".into()))?,
    );
    let g = geom.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 || cin / g != cig {
        return Err(KernelError::Shape(format!("groups={g} inconsistent with in={cin}, out={cout}")));
    }
    let a_scale = per_tensor_scale(act)?;
    let (ho, wo, [pt, pl]) = conv_out_dims([h, wd], [kh, kw], geom)?;
    let cog = cout / g;
    let mut out = vec![0i32; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for o in 0..cout {
                let grp = o / cog;
                let idx = (oy * wo + ox) * cout + o;
                let mut acc = 0i32;
                for ky in 0..kh {
                    let iy = (oy * geom.stride + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * geom.stride + kx) as isize - pl as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let base = (iy as usize * wd + ix as usize) * cin + grp * cig;
                        for ci in 0..cig {
                            let prod = act.values[base + ci] * w.values[((ky * kw + kx) * cig + ci) * cout + o];
                            acc = acc.checked_add(prod).ok_or(KernelError::Overflow { index: idx })?;
                        }
                    }
                }
                out[idx] = acc;
            }
        }
    }
    Ok(Accumulator {
        shape: vec![ho, wo, cout],
        values: out,
        scale: (0..cout).map(|o| a_scale * w.scale.at(o)).collect(),
    })
}

/// Integer dense layer; `act` holds `n_in` values, `w` is `[n_in, n_out]`.
pub fn int_dense(act: &IntTensor, w: &IntTensor) -> Result<Accumulator, KernelError> {
    check_bits(act)?;
    check_bits(w)?;
    let [n_in, n_out] = <[usize; 2]>::try_from(w.shape.as_slice())
        .map_err(|_| KernelError::Shape("dense weights must be [in, out]".into()))?;
    if act.values.len() != n_in {
        return Err(KernelError::LengthMismatch(act.values.len(), n_in));
    }
    let a_scale = per_tensor_scale(act)?;
    let mut out = vec![0i32; n_out];
    for (o, acc) in out.iter_mut().enumerate() {
        for i in 0..n_in {
            *acc = acc
                .checked_add(act.values[i] * w.values[i * n_out + o])
                .ok_or(KernelError::Overflow { index: o })?;
        }
    }
    Ok(Accumulator {
        shape: vec![n_out],
        values: out,
        scale: (0..n_out).map(|o| a_scale * w.scale.at(o)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_example() {
        let a = IntTensor::signed(vec![2], vec![1, 2], DType::Int8, Scale::PerTensor(1.0)).unwrap();
        let w = IntTensor::signed(vec![2, 1], vec![3, 4], DType::Int8, Scale::PerTensor(1.0)).unwrap();
        let out = int_dense(&a, &w).unwrap();
        assert_eq!(out.values, vec![11]);
        assert_eq!(out.dequantize(), vec![11.0]);
    }

    #[test]
    fn int4_dense_max_magnitude_is_exact() {
        let a = IntTensor::signed(vec![16], vec![-7; 16], DType::Int4, Scale::PerTensor(0.5)).unwrap();
        let w = IntTensor::signed(vec![16, 2], vec![-7; 32], DType::Int4, Scale::PerTensor(1.0)).unwrap();
        let out = int_dense(&a, &w).unwrap();
        assert_eq!(out.values, vec![16 * 49, 16 * 49]);
        assert_eq!(out.dequantize(), vec![392.0, 392.0]);
    }

    #[test]
    fn range_and_bits_checked() {
        assert!(matches!(
            IntTensor::signed(vec![1], vec![8], DType::Int4, Scale::PerTensor(1.0)),
            Err(KernelError::Range { .. })
        ));
        let b = IntTensor::signed(vec![1], vec![1], DType::Int2, Scale::PerTensor(1.0)).unwrap();
        assert!(matches!(int_dense(&b, &b), Err(KernelError::Bits(DType::Int2))));
        assert!(matches!(
            IntTensor::unsigned(vec![2], vec![1, -1], DType::Int4),
            Err(KernelError::SignedInput { index: 1, value: -1 })
        ));
    }
}
