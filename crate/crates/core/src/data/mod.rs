//! Datasets, loaders, synthetic blobs and seeded batch iteration.

mod csv_file;
mod idx;

pub use csv_file::load_csv;
pub use idx::load_idx;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid_arg, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-feature standardization constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    /// Original label of each class index.
    pub label_map: Vec<String>,
    pub source: String,
    normalization: Option<Normalization>,
}

/// Structured description written next to runs for reproducibility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: String,
    pub split: Split,
    pub samples: usize,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub label_map: Vec<String>,
    pub checksum: String,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, split: Split, source: impl Into<String>) -> Result<Self> {
        if inputs.rank() < 2 || inputs.rows() == 0 {
            return Err(invalid_arg!("dataset inputs must be [n, ...] with n >= 1, got {:?}", inputs.shape()));
        }
        if labels.len() != inputs.rows() {
            return Err(invalid_arg!("{} labels for {} samples", labels.len(), inputs.rows()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(invalid_arg!("label {bad} outside [0, {classes})"));
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
            split,
            label_map: (0..classes).map(|c| c.to_string()).collect(),
            source: source.into(),
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Per-feature mean and standard deviation; constant features get
    /// `std = 1`.
    pub fn fit_normalization(&self) -> Normalization {
        let d = self.inputs.row_len();
        let n = self.len() as f64;
        let mut mean = vec![0f64; d];
        let mut sq = vec![0f64; d];
        for i in 0..self.len() {
            for (j, &v) in self.inputs.row(i).iter().enumerate() {
                mean[j] += v as f64;
                sq[j] += (v as f64) * (v as f64);
            }
        }
        let mut std = vec![0f32; d];
        for j in 0..d {
            mean[j] /= n;
            let var = (sq[j] / n - mean[j] * mean[j]).max(0.0);
            std[j] = if var.sqrt() < 1e-6 { 1.0 } else { var.sqrt() as f32 };
        }
        Normalization {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    /// Standardizes inputs in place. Applying the same constants again is a
    /// no-op; applying different ones is an error.
    pub fn normalize(&mut self, stats: &Normalization) -> Result<()> {
        if let Some(done) = &self.normalization {
            return if done == stats {
                Ok(())
            } else {
                Err(invalid_arg!("dataset `{}` is already normalized with other constants", self.source))
            };
        }
        let d = self.inputs.row_len();
        if stats.mean.len() != d || stats.std.len() != d {
            return Err(invalid_arg!("normalization has {} features, dataset has {d}", stats.mean.len()));
        }
        for row in self.inputs.data_mut().chunks_exact_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
                *v = (*v - m) / s;
            }
        }
        self.normalization = Some(stats.clone());
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        }
    }

    /// SHA-256 over input bytes and labels.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.inputs.to_le_bytes());
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            source: self.source.clone(),
            split: self.split,
            samples: self.len(),
            input_shape: self.sample_shape().to_vec(),
            classes: self.classes,
            label_map: self.label_map.clone(),
            checksum: self.checksum(),
            normalization: self.normalization.clone(),
        }
    }
}

/// Isotropic Gaussian clusters around centers drawn from `N(0, I)`.
/// The first `floor(0.8 m)` samples of every class go to the train split.
pub fn synth_blobs(seed: u64, classes: usize, dim: usize, per_class: usize, spread: f32) -> Result<(Dataset, Dataset)> {
    if classes < 2 || dim < 2 || per_class < 2 {
        return Err(invalid_arg!(
            "synth_blobs needs classes >= 2, dim >= 2, per_class >= 2; got {classes}, {dim}, {per_class}"
        ));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(invalid_arg!("spread must be finite and non-negative, got {spread}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let n_train = per_class * 4 / 5;
    let (mut train_x, mut train_y, mut test_x, mut test_y) = (vec![], vec![], vec![], vec![]);
    for (c, center) in centers.iter().enumerate() {
        for k in 0..per_class {
            let point = center.iter().map(|&m| {
                let z: f32 = StandardNormal.sample(&mut rng);
                m + spread * z
            });
            if k < n_train {
                train_x.extend(point);
                train_y.push(c);
            } else {
                test_x.extend(point);
                test_y.push(c);
            }
        }
    }
    let source = format!("synth_blobs(seed={seed}, classes={classes}, dim={dim}, per_class={per_class}, spread={spread})");
    let train = Dataset::new(
        Tensor::new(vec![train_y.len(), dim], train_x)?,
        train_y,
        classes,
        Split::Train,
        source.clone(),
    )?;
    let test = Dataset::new(Tensor::new(vec![test_y.len(), dim], test_x)?, test_y, classes, Split::Test, source)?;
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

/// Sample order for one epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub fn batches(ds: &Dataset, plan: &BatchPlan, epoch: usize) -> Result<Vec<Batch>> {
    if plan.batch_size == 0 {
        return Err(invalid_arg!("batch_size must be at least 1"));
    }
    let order = epoch_order(ds.len(), plan.seed, epoch);
    Ok(order
        .chunks(plan.batch_size)
        .filter(|c| !plan.drop_last || c.len() == plan.batch_size)
        .map(|c| Batch {
            indices: c.to_vec(),
            inputs: ds.inputs.select_rows(c),
            labels: c.iter().map(|&i| ds.labels[i]).collect(),
        })
        .collect())
}
