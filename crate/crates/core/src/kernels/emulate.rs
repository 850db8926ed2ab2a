//! Integer matmul emulated with binary AND-popcount matmuls.
//!
//! Each unsigned operand is split into bit planes `a_i`, `b_j`; the product is
//! `Σ_{i,j} popcount(a_i ∧ b_j) · 2^(i+j)`. The emulation performs `I·J`
//! binary matmuls, i.e. `I·J` binary MACs per integer MAC.

use super::{IntTensor, KernelError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emulation {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<i64>,
    /// Binary MACs executed across all plane pairs.
    pub binary_macs: u64,
    /// MACs of the equivalent direct integer matmul.
    pub direct_macs: u64,
}

fn dims(a: &IntTensor, b: &IntTensor) -> Result<(usize, usize, usize), KernelError> {
    let (&[m, k], &[k2, n]) = (
        <&[usize; 2]>::try_from(a.shape.as_slice()).map_err(|_| KernelError::Shape("lhs must be 2-D".into()))?,
        <&[usize; 2]>::try_from(b.shape.as_slice()).map_err(|_| KernelError::Shape("rhs must be 2-D".into()))?,
    );
    if k != k2 {
        return Err(KernelError::LengthMismatch(k, k2));
    }
    Ok((m, k, n))
}

fn check_unsigned(t: &IntTensor) -> Result<(), KernelError> {
    if let Some((index, &value)) = t.values.iter().enumerate().find(|(_, &v)| v < 0) {
        return Err(KernelError::SignedInput { index, value });
    }
    if t.signed {
        return Err(KernelError::SignedTensor);
    }
    if t.bits.is_float() {
        return Err(KernelError::Bits(t.bits));
    }
    Ok(())
}

/// Packs bit `plane` of each row of a `rows x k` matrix (given by `at(r, kk)`) into words.
fn pack_plane(rows: usize, k: usize, plane: u32, at: impl Fn(usize, usize) -> i32) -> (Vec<u64>, usize) {
    let wpr = k.div_ceil(64);
    let mut words = vec![0u64; rows * wpr];
    for r in 0..rows {
        for kk in 0..k {
            if (at(r, kk) >> plane) & 1 == 1 {
                words[r * wpr + kk / 64] |= 1u64 << (kk % 64);
            }
        }
    }
    (words, wpr)
}

pub fn bitplane_matmul(a: &IntTensor, b: &IntTensor) -> Result<Emulation, KernelError> {
    check_unsigned(a)?;
    check_unsigned(b)?;
    let (m, k, n) = dims(a, b)?;
    let (ib, jb) = (a.bits.bits(), b.bits.bits());
    let a_planes: Vec<(Vec<u64>, usize)> = (0..ib).map(|i| pack_plane(m, k, i, |r, kk| a.values[r * k + kk])).collect();
    // rhs packed by column so both operands run over contiguous k.
    let b_planes: Vec<(Vec<u64>, usize)> = (0..jb).map(|j| pack_plane(n, k, j, |c, kk| b.values[kk * n + c])).collect();
    let mut values = vec![0i64; m * n];
    let mut binary_macs = 0u64;
    for (i, (ap, wpr)) in a_planes.iter().enumerate() {
        for (j, (bp, _)) in b_planes.iter().enumerate() {
            let weight = 1i64 << (i + j);
            for r in 0..m {
                let arow = &ap[r * wpr..(r + 1) * wpr];
                for c in 0..n {
                    let bcol = &bp[c * wpr..(c + 1) * wpr];
                    let ones: u32 = arow.iter().zip(bcol).map(|(x, y)| (x & y).count_ones()).sum();
                    values[r * n + c] += weight * ones as i64;
                }
            }
            binary_macs += (m * k * n) as u64;
        }
    }
    Ok(Emulation {
        rows: m,
        cols: n,
        values,
        binary_macs,
        direct_macs: (m * k * n) as u64,
    })
}

/// Plain integer matmul, the oracle for [`bitplane_matmul`].
pub fn direct_matmul(a: &IntTensor, b: &IntTensor) -> Result<Vec<i64>, KernelError> {
    let (m, k, n) = dims(a, b)?;
    let mut out = vec![0i64; m * n];
    for r in 0..m {
        for kk in 0..k {
            let av = a.values[r * k + kk] as i64;
            for c in 0..n {
                out[r * n + c] += av * b.values[kk * n + c] as i64;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphir::DType;
    use crate::kernels::Scale;

    #[test]
    fn scalar_worked_instance() {
        let a = IntTensor::unsigned(vec![1, 1], vec![2], DType::Int2).unwrap();
        let b = IntTensor::unsigned(vec![1, 1], vec![3], DType::Int2).unwrap();
        let e = bitplane_matmul(&a, &b).unwrap();
        assert_eq!(e.values, vec![6]);
        assert_eq!(e.binary_macs, 4);
        assert_eq!(e.direct_macs, 1);
    }

    #[test]
    fn single_planes_reduce_to_and_matmul() {
        let a = IntTensor::unsigned(vec![2, 3], vec![1, 0, 1, 1, 1, 0], DType::Binary).unwrap();
        let b = IntTensor::unsigned(vec![3, 2], vec![1, 1, 0, 1, 1, 0], DType::Binary).unwrap();
        let e = bitplane_matmul(&a, &b).unwrap();
        assert_eq!(e.values, vec![2, 1, 1, 2]);
        assert_eq!(e.binary_macs, e.direct_macs);
    }

    #[test]
    fn signed_operands_rejected() {
        let s = IntTensor::signed(vec![1, 1], vec![-1], DType::Int4, Scale::PerTensor(1.0)).unwrap();
        let u = IntTensor::unsigned(vec![1, 1], vec![1], DType::Int4).unwrap();
        assert!(matches!(bitplane_matmul(&s, &u), Err(KernelError::SignedInput { .. })));
        let s2 = IntTensor::signed(vec![1, 1], vec![1], DType::Int4, Scale::PerTensor(1.0)).unwrap();
        assert!(matches!(bitplane_matmul(&u, &s2), Err(KernelError::SignedTensor)));
    }
}
