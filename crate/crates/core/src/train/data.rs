//! Synthetic labeled images and teacher-probability files.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, H, W, C]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// Class prototypes plus per-sample noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub classes: usize,
    pub shape: [usize; 3],
    /// Half-width of the uniform noise added to the prototype.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            samples: 512,
            classes: 10,
            shape: [32, 32, 3],
            noise: 1.0,
            seed: 0,
        }
    }
}

impl Dataset {
    /// Sample `i` has label `i mod classes` and pixels `prototype + U(-noise, noise)`.
    pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset, TrainError> {
        if spec.samples == 0 || spec.classes < 2 {
            return Err(TrainError::Config("dataset needs samples and at least 2 classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let [h, w, c] = spec.shape;
        let per = h * w * c;
        let protos: Vec<Vec<f64>> = (0..spec.classes)
            .map(|_| (0..per).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut data = Vec::with_capacity(spec.samples * per);
        let mut labels = Vec::with_capacity(spec.samples);
        for i in 0..spec.samples {
            let label = i % spec.classes;
            labels.push(label);
            for &p in &protos[label] {
                let n = if spec.noise > 0.0 { rng.gen_range(-spec.noise..spec.noise) } else { 0.0 };
                data.push(p + n);
            }
        }
        Ok(Dataset {
            images: Tensor::new([spec.samples, h, w, c], data)?,
            labels,
            classes: spec.classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// One-hot targets of shape `[N, 1, 1, classes]`.
    pub fn one_hot(&self) -> Tensor {
        let mut t = Tensor::zeros([self.len(), 1, 1, self.classes]);
        for (i, &l) in self.labels.iter().enumerate() {
            t.data[i * self.classes + l] = 1.0;
        }
        t
    }
}

/// Reads one probability row per example (comma-separated, no header) and
/// checks that each row is a distribution.
pub fn read_teacher_csv(path: &Path, examples: usize, classes: usize) -> Result<Tensor, TrainError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| TrainError::Teacher(format!("{}: {e}", path.display())))?;
    let mut data = Vec::with_capacity(examples * classes);
    let mut rows = 0;
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| TrainError::Teacher(format!("row {}: {e}", r + 1)))?;
        if rec.len() != classes {
            return Err(TrainError::Teacher(format!("row {} has {} columns, expected {classes}", r + 1, rec.len())));
        }
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| TrainError::Teacher(format!("row {}: `{field}` is not a number", r + 1)))?;
            data.push(v);
        }
        rows += 1;
    }
    if rows != examples {
        return Err(TrainError::Teacher(format!("{rows} rows for {examples} examples")));
    }
    let t = Tensor::new([examples, 1, 1, classes], data)?;
    validate_distribution(&t)?;
    Ok(t)
}

/// Every row non-negative and summing to one within `1e-5`.
pub fn validate_distribution(t: &Tensor) -> Result<(), TrainError> {
    let k = t.channels();
    for (i, row) in t.data.chunks_exact(k).enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-5 {
            return Err(TrainError::Teacher(format!("row {i} is not a distribution (sum {sum})")));
        }
    }
    Ok(())
}
