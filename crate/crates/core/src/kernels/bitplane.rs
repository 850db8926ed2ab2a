//! Bit-packed sign tensors and XNOR/popcount kernels.

use super::{conv_out_dims, Accumulator, ConvGeometry, KernelError};

const WORD: usize = 64;

/// Sign tensor packed one bit per element, innermost axis contiguous.
///
/// Bit 1 encodes +1 and bit 0 encodes -1. Each row of the innermost axis
/// (the channels of one pixel, or one matrix row) starts on a fresh word and
/// its trailing pad bits are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPlane {
    shape: Vec<usize>,
    words_per_row: usize,
    words: Vec<u64>,
    /// Set bits mark lanes that contribute to dot products; `None` means every real lane.
    valid_mask: Option<Vec<u64>>,
}

fn row_mask(len: usize, words_per_row: usize) -> Vec<u64> {
    let mut m = vec![u64::MAX; words_per_row];
    let tail = len % WORD;
    if tail != 0 {
        m[words_per_row - 1] = (1u64 << tail) - 1;
    }
    if len == 0 {
        m.clear();
    }
    m
}

impl BitPlane {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn row_len(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn rows(&self) -> usize {
        self.shape[..self.shape.len() - 1].iter().product()
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub fn valid_mask(&self) -> Option<&[u64]> {
        self.valid_mask.as_deref()
    }

    /// Flip one element's bit; used to inject faults in verification runs.
    pub fn flip(&mut self, index: usize) {
        let row_len = self.row_len();
        let (r, k) = (index / row_len, index % row_len);
        self.words[r * self.words_per_row + k / WORD] ^= 1u64 << (k % WORD);
    }

    fn zeros(shape: Vec<usize>) -> Self {
        let row_len = *shape.last().unwrap_or(&0);
        let words_per_row = row_len.div_ceil(WORD);
        let rows: usize = shape[..shape.len() - 1].iter().product();
        BitPlane {
            shape,
            words_per_row,
            words: vec![0; rows * words_per_row],
            valid_mask: None,
        }
    }

    fn get(&self, r: usize, k: usize) -> bool {
        self.words[r * self.words_per_row + k / WORD] >> (k % WORD) & 1 == 1
    }

    fn set(&mut self, r: usize, k: usize) {
        self.words[r * self.words_per_row + k / WORD] |= 1u64 << (k % WORD);
    }

    /// Unpack to a dense ±1 tensor. Masked-out lanes unpack as 0.
    pub fn unpack(&self) -> Vec<f64> {
        let row_len = self.row_len();
        let mut out = Vec::with_capacity(self.len());
        for r in 0..self.rows() {
            for k in 0..row_len {
                let valid = match &self.valid_mask {
                    Some(m) => m[r * self.words_per_row + k / WORD] >> (k % WORD) & 1 == 1,
                    None => true,
                };
                out.push(match (valid, self.get(r, k)) {
                    (false, _) => 0.0,
                    (true, true) => 1.0,
                    (true, false) => -1.0,
                });
            }
        }
        out
    }
}

/// Pack a ±1 tensor. The innermost axis of `shape` is packed.
pub fn pack_signs(x: &[f64], shape: &[usize]) -> Result<BitPlane, KernelError> {
    if shape.is_empty() || shape.iter().product::<usize>() != x.len() {
        return Err(KernelError::Shape(format!("{} values for shape {shape:?}", x.len())));
    }
    let mut plane = BitPlane::zeros(shape.to_vec());
    let row_len = plane.row_len();
    for (i, &v) in x.iter().enumerate() {
        if v == 1.0 {
            plane.set(i / row_len, i % row_len);
        } else if v != -1.0 {
            return Err(KernelError::NotSign { index: i, value: v });
        }
    }
    Ok(plane)
}

/// `n - 2 * popcount(a ^ b)` over word slices whose pad bits are zero.
#[inline]
pub fn xnor_dot_words(a: &[u64], b: &[u64], n: usize) -> i64 {
    let diff: u32 = a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum();
    n as i64 - 2 * diff as i64
}

/// Dot product restricted to lanes set in `mask`: agreements minus disagreements.
#[inline]
pub fn masked_xnor_dot_words(a: &[u64], b: &[u64], mask: &[u64]) -> i64 {
    let mut agree = 0i64;
    let mut total = 0i64;
    for ((x, y), m) in a.iter().zip(b).zip(mask) {
        agree += (!(x ^ y) & m).count_ones() as i64;
        total += m.count_ones() as i64;
    }
    2 * agree - total
}

/// `Σ a_k b_k` of two packed ±1 vectors of equal length.
pub fn xnor_popcount_dot(a: &BitPlane, b: &BitPlane) -> Result<i64, KernelError> {
    if a.len() != b.len() || a.words_per_row != b.words_per_row || a.shape.len() != b.shape.len() {
        return Err(KernelError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if a.valid_mask.is_some() || b.valid_mask.is_some() {
        return Err(KernelError::Shape("unmasked dot called on masked planes".into()));
    }
    Ok(xnor_dot_words(&a.words, &b.words, n))
}

/// Copy `act` ([H, W, C]) into a zero-padded plane whose halo lanes are masked out.
pub fn pad_with_mask(act: &BitPlane, top: usize, bottom: usize, left: usize, right: usize) -> BitPlane {
    let [h, w, c] = [act.shape[0], act.shape[1], act.shape[2]];
    let (hp, wp) = (h + top + bottom, w + left + right);
    let mut out = BitPlane::zeros(vec![hp, wp, c]);
    let wpr = out.words_per_row;
    let valid = row_mask(c, wpr);
    let mut mask = vec![0u64; out.words.len()];
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + x) * wpr;
            let dst = ((y + top) * wp + x + left) * wpr;
            out.words[dst..dst + wpr].copy_from_slice(&act.words[src..src + wpr]);
            mask[dst..dst + wpr].copy_from_slice(&valid);
        }
    }
    out.valid_mask = Some(mask);
    out
}

/// Binary filter bank `[kh, kw, C, F]`, packed per filter as `[kh, kw, C]` planes.
#[derive(Debug, Clone)]
pub struct BinaryFilters {
    pub kernel: [usize; 2],
    pub in_channels: usize,
    pub filters: Vec<BitPlane>,
}

impl BinaryFilters {
    /// Pack HWIO ±1 weights.
    pub fn pack(w: &[f64], shape: [usize; 4]) -> Result<Self, KernelError> {
        let [kh, kw, c, f] = shape;
        if w.len() != kh * kw * c * f {
            return Err(KernelError::Shape(format!("{} weights for {shape:?}", w.len())));
        }
        let mut filters = Vec::with_capacity(f);
        for o in 0..f {
            let per: Vec<f64> = (0..kh * kw * c).map(|i| w[i * f + o]).collect();
            filters.push(pack_signs(&per, &[kh, kw, c])?);
        }
        Ok(BinaryFilters {
            kernel: [kh, kw],
            in_channels: c,
            filters,
        })
    }
}

/// XNOR/popcount convolution of a packed sign activation with packed sign filters.
///
/// Out-of-bounds taps contribute exactly 0 through the validity mask, which
/// makes the result equal to a float convolution with zero padding.
pub fn binary_conv2d(act: &BitPlane, w: &BinaryFilters, geom: ConvGeometry) -> Result<Accumulator, KernelError> {
    if act.shape.len() != 3 || act.shape[2] != w.in_channels {
        return Err(KernelError::Shape(format!(
            "activation {:?} vs filters with {} input channels",
            act.shape, w.in_channels
        )));
    }
    let [kh, kw] = w.kernel;
    let (h, wd) = (act.shape[0], act.shape[1]);
    let (ho, wo, [pt, pl]) = conv_out_dims([h, wd], [kh, kw], geom)?;
    let pb = ((ho - 1) * geom.stride + kh).saturating_sub(h + pt);
    let pr = ((wo - 1) * geom.stride + kw).saturating_sub(wd + pl);
    let padded = pad_with_mask(act, pt, pb, pl, pr);
    let mask = padded.valid_mask.as_ref().expect("padded plane carries a mask");
    let wpr = padded.words_per_row;
    let wp = padded.shape[1];
    let nf = w.filters.len();
    let mut out = vec![0i32; ho * wo * nf];
    for oy in 0..ho {
        for ox in 0..wo {
            for (f, filt) in w.filters.iter().enumerate() {
                let mut acc = 0i64;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let p = ((oy * geom.stride + ky) * wp + ox * geom.stride + kx) * wpr;
                        let t = (ky * kw + kx) * wpr;
                        acc += masked_xnor_dot_words(
                            &padded.words[p..p + wpr],
                            &filt.words[t..t + wpr],
                            &mask[p..p + wpr],
                        );
                    }
                }
                out[(oy * wo + ox) * nf + f] = acc as i32;
            }
        }
    }
    Ok(Accumulator {
        shape: vec![ho, wo, nf],
        values: out,
        scale: vec![1.0; nf],
    })
}
