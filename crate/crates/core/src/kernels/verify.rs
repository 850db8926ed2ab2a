//! Randomized equivalence suites comparing the packed kernels with their oracles.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    bitplane_matmul, binary_conv2d, direct_matmul, float_conv2d, pack_signs, BinaryFilters, ConvGeometry, IntTensor,
    KernelError,
};
use crate::graphir::{DType, Padding};

/// Deliberate corruption used to prove that the suites catch a wrong kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultInjection {
    /// Case index (within the binary-conv suite) whose packed activation gets one bit flipped.
    pub case: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub failures: Vec<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            let status = if s.passed() { "PASS" } else { "FAIL" };
            writeln!(f, "{status} {:<16} {} cases, {} mismatches", s.name, s.cases, s.failures.len())?;
            for msg in s.failures.iter().take(5) {
                writeln!(f, "    {msg}")?;
            }
        }
        Ok(())
    }
}

fn signs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// One random binary convolution; `Ok(None)` when it matches the float oracle.
fn conv_case(rng: &mut ChaCha8Rng, flip: bool) -> Result<Option<String>, KernelError> {
    let k = [1, 3, 5][rng.gen_range(0..3)];
    let stride = rng.gen_range(1..=2);
    let padding = if rng.gen() { Padding::Same } else { Padding::Valid };
    let h = rng.gen_range(k..=k + 6);
    let w = rng.gen_range(k..=k + 6);
    // Channel counts straddle word boundaries.
    let c = [1, 3, 63, 64, 65, 130][rng.gen_range(0..6)];
    let f = rng.gen_range(1..=6);
    let x = signs(rng, h * w * c);
    let wt = signs(rng, k * k * c * f);
    let geom = ConvGeometry::new(stride, padding);
    let mut act = pack_signs(&x, &[h, w, c])?;
    if flip {
        // Element 0 lies in the first output window under every geometry drawn here.
        act.flip(0);
    }
    let got = binary_conv2d(&act, &BinaryFilters::pack(&wt, [k, k, c, f])?, geom)?;
    let want = float_conv2d(&x, [h, w, c], &wt, [k, k, c, f], geom)?;
    let bad = got.values.iter().zip(&want.values).position(|(&a, &b)| a as f64 != b);
    Ok(bad.map(|i| {
        format!(
            "in [{h},{w},{c}] k={k} f={f} stride={stride} {padding:?}: output {i} packed {} vs oracle {}",
            got.values[i], want.values[i]
        )
    }))
}

fn matmul_case(rng: &mut ChaCha8Rng, ib: DType, jb: DType) -> Result<Option<String>, KernelError> {
    let (m, k, n) = (rng.gen_range(1..=6), rng.gen_range(1..=150), rng.gen_range(1..=6));
    let draw = |rng: &mut ChaCha8Rng, len: usize, d: DType| -> Vec<i32> {
        let top = (1i32 << d.bits()) - 1;
        (0..len).map(|_| rng.gen_range(0..=top)).collect()
    };
    let a = IntTensor::unsigned(vec![m, k], draw(rng, m * k, ib), ib)?;
    let b = IntTensor::unsigned(vec![k, n], draw(rng, k * n, jb), jb)?;
    let emu = bitplane_matmul(&a, &b)?;
    let direct = direct_matmul(&a, &b)?;
    let ratio = (ib.bits() * jb.bits()) as u64;
    Ok(if emu.values != direct {
        Some(format!("{m}x{k}x{n} ({ib:?},{jb:?}): values differ"))
    } else if emu.binary_macs != ratio * emu.direct_macs {
        Some(format!(
            "{m}x{k}x{n} ({ib:?},{jb:?}): {} binary MACs for {} direct, expected ratio {ratio}",
            emu.binary_macs, emu.direct_macs
        ))
    } else {
        None
    })
}

fn pack_case(rng: &mut ChaCha8Rng) -> Result<Option<String>, KernelError> {
    let rows = rng.gen_range(1..=4);
    let len = rng.gen_range(1..=200);
    let x = signs(rng, rows * len);
    let p = pack_signs(&x, &[rows, len])?;
    Ok((p.unpack() != x).then(|| format!("[{rows},{len}]: unpack differs")))
}

fn run(name: &'static str, cases: usize, mut case: impl FnMut(usize) -> Result<Option<String>, KernelError>) -> SuiteResult {
    let failures = (0..cases)
        .filter_map(|i| match case(i) {
            Ok(None) => None,
            Ok(Some(msg)) => Some(format!("case {i}: {msg}")),
            Err(e) => Some(format!("case {i}: kernel error: {e}")),
        })
        .collect();
    SuiteResult { name, cases, failures }
}

/// Runs `cases` binary-conv cases, `cases / 5` (at least one) bit-plane matmul cases per
/// operand width pair in {1, 2, 4, 8}², and `cases` pack round trips.
pub fn verify_kernels(cases: usize, seed: u64, fault: Option<FaultInjection>) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = run("binary_conv2d", cases, |i| conv_case(&mut rng, fault.is_some_and(|f| f.case == i)));
    let widths = [DType::Binary, DType::Int2, DType::Int4, DType::Int8];
    let per_pair = (cases / 5).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let matmul = run("bitplane_matmul", per_pair * 16, |i| {
        let pair = i / per_pair;
        matmul_case(&mut rng, widths[pair / 4], widths[pair % 4])
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let pack = run("pack_roundtrip", cases, |_| pack_case(&mut rng));
    VerifyReport {
        suites: vec![conv, matmul, pack],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes() {
        let r = verify_kernels(20, 3, None);
        assert!(r.passed(), "{r}");
        assert_eq!(r.suites[1].cases, 4 * 16);
    }

    #[test]
    fn injected_flip_is_caught() {
        let r = verify_kernels(10, 3, Some(FaultInjection { case: 4 }));
        assert!(!r.passed());
        assert_eq!(r.suites[0].failures.len(), 1);
        assert!(r.suites[0].failures[0].starts_with("case 4:"));
    }
}
