use rand::Rng;

use super::NnError;

/// Dense `f64` tensor with a fixed rank-4 shape.
///
/// Activations are `[N, H, W, C]`, conv weights `[kh, kw, in/groups, out]`,
/// dense weights `[1, 1, in, out]`, per-channel vectors `[1, 1, 1, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self, NnError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(NnError::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], v: f64) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn vector(v: Vec<f64>) -> Self {
        Tensor {
            shape: [1, 1, 1, v.len()],
            data: v,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::vector(vec![v])
    }

    /// Uniform values in `[-limit, limit)`.
    pub fn uniform<R: Rng>(shape: [usize; 4], limit: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(|_| rng.gen_range(-limit..limit)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[3]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    /// Sum over every axis except the last.
    pub fn channel_sums(&self) -> Vec<f64> {
        let c = self.channels();
        let mut out = vec![0.0; c];
        for row in self.data.chunks_exact(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out
    }

    /// Batch items `lo..hi`.
    pub fn slice_batch(&self, lo: usize, hi: usize) -> Tensor {
        let n = self.item_len();
        Tensor {
            shape: [hi - lo, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[lo * n..hi * n].to_vec(),
        }
    }

    /// Stack the given batch items of `self` into a new tensor.
    pub fn gather_batch(&self, idx: &[usize]) -> Tensor {
        let n = self.item_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Tensor {
            shape: [idx.len(), self.shape[1], self.shape[2], self.shape[3]],
            data,
        }
    }
}
