//! Datasets and the label non-IID client partitioner.
//!
//! Data sources: IDX-format image/label files (the MNIST distribution
//! format) and seeded synthetic Gaussian blobs for desk-scale runs. The
//! partitioner draws per-class client proportions from a Dirichlet
//! distribution, so smaller concentration values produce heavier label skew.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A labeled dataset with features scaled to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DataConsistency(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::invalid("labels", "dataset is empty"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        if features
            .data()
            .iter()
            .any(|&v| !v.is_finite() || !(0.0..=1.0).contains(&v))
        {
            return Err(Error::DataConsistency(
                "feature values must lie in [0, 1]".into(),
            ));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature dimensionality.
    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        (
            Tensor::new(vec![indices.len(), dim], data).expect("batch shape"),
            labels,
        )
    }

    /// New dataset holding only the given rows (same class count).
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::invalid("indices", "subset would be empty"));
        }
        let (features, labels) = self.batch(indices);
        Ok(Dataset {
            features,
            labels,
            num_classes: self.num_classes,
        })
    }

    /// Seeded random subsample keeping `fraction` of the rows, in original
    /// row order.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::invalid(
                "fraction",
                format!("must lie in [0, 1], got {fraction}"),
            ));
        }
        let keep = (fraction * self.len() as f64).floor() as usize;
        if keep == 0 {
            return Err(Error::invalid(
                "fraction",
                format!("{fraction} of {} rows keeps nothing", self.len()),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices: Vec<usize> = (0..self.len()).collect();
        indices.shuffle(&mut rng);
        indices.truncate(keep);
        indices.sort_unstable();
        self.subset(&indices)
    }
}

/// Dirichlet partition parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::invalid("num_clients", "must be at least 1"));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid(
                "gamma",
                format!("must be positive and finite, got {}", self.gamma),
            ));
        }
        Ok(())
    }
}

/// One client's slice of the parent dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

impl ClientShard {
    /// Shard size `D_i`.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Loads an IDX image/label file pair into a dataset with pixel values
/// divided by 255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();

    let image_bytes = fs::read(images_path)?;
    let mut cursor = std::io::Cursor::new(&image_bytes);
    let magic = cursor.read_u32::<BigEndian>()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxMagic {
            path: images_path.display().to_string(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = cursor.read_u32::<BigEndian>()? as usize;
    let rows = cursor.read_u32::<BigEndian>()? as usize;
    let cols = cursor.read_u32::<BigEndian>()? as usize;
    let dim = rows * cols;
    let mut pixels = vec![0u8; count * dim];
    std::io::Read::read_exact(&mut cursor, &mut pixels)?;
    let features: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();

    let label_bytes = fs::read(labels_path)?;
    let mut cursor = std::io::Cursor::new(&label_bytes);
    let magic = cursor.read_u32::<BigEndian>()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxMagic {
            path: labels_path.display().to_string(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let label_count = cursor.read_u32::<BigEndian>()? as usize;
    if label_count != count {
        return Err(Error::DataConsistency(format!(
            "{} images in {} but {} labels in {}",
            count,
            images_path.display(),
            label_count,
            labels_path.display()
        )));
    }
    let mut raw_labels = vec![0u8; label_count];
    std::io::Read::read_exact(&mut cursor, &mut raw_labels)?;
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);

    Dataset::new(Tensor::new(vec![count, dim], features)?, labels, num_classes)
}

/// Seeded per-class isotropic Gaussian blobs with means drawn inside the
/// unit cube; samples are clamped to `[0, 1]`.
pub fn synth_gaussian(
    num_classes: usize,
    dims: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    let (train, _) = synth_blobs(num_classes, dims, per_class, 0, spread, seed)?;
    Ok(train)
}

/// Train/test split from one blob family: fresh noise per sample, shared
/// per-class means.
pub fn synth_train_test(
    num_classes: usize,
    dims: usize,
    train_per_class: usize,
    test_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let (train, test) = synth_blobs(num_classes, dims, train_per_class, test_per_class, spread, seed)?;
    Ok((train, test.expect("test_per_class > 0")))
}

fn synth_blobs(
    num_classes: usize,
    dims: usize,
    train_per_class: usize,
    test_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, Option<Dataset>)> {
    if num_classes == 0 || dims == 0 || train_per_class == 0 {
        return Err(Error::invalid(
            "synth_gaussian",
            "num_classes, dims, and per_class must all be positive",
        ));
    }
    if spread < 0.0 || !spread.is_finite() {
        return Err(Error::invalid(
            "spread",
            format!("must be nonnegative and finite, got {spread}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Means stay away from the cube faces so the noise is not one-sidedly
    // clipped.
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dims).map(|_| rng.gen_range(0.2..0.8)).collect())
        .collect();

    let sample = |mean: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        mean.iter()
            .map(|&m| {
                let noise: f64 = StandardNormal.sample(rng);
                (m + spread * noise).clamp(0.0, 1.0)
            })
            .collect()
    };

    let mut train_data = Vec::with_capacity(num_classes * train_per_class * dims);
    let mut train_labels = Vec::with_capacity(num_classes * train_per_class);
    let mut test_data = Vec::with_capacity(num_classes * test_per_class * dims);
    let mut test_labels = Vec::with_capacity(num_classes * test_per_class);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..train_per_class {
            train_data.extend(sample(mean, &mut rng));
            train_labels.push(class);
        }
        for _ in 0..test_per_class {
            test_data.extend(sample(mean, &mut rng));
            test_labels.push(class);
        }
    }

    let train = Dataset::new(
        Tensor::new(vec![num_classes * train_per_class, dims], train_data)?,
        train_labels,
        num_classes,
    )?;
    let test = if test_per_class > 0 {
        Some(Dataset::new(
            Tensor::new(vec![num_classes * test_per_class, dims], test_data)?,
            test_labels,
            num_classes,
        )?)
    } else {
        None
    };
    Ok((train, test))
}

/// Splits a dataset across clients by drawing per-class client proportions
/// from `Dirichlet(gamma * 1_N)`.
///
/// Shards are pairwise disjoint and exhaustive; class counts are conserved
/// exactly via largest-remainder rounding. Empty shards are possible under
/// heavy skew and must be skipped downstream.
pub fn dirichlet_partition(dataset: &Dataset, config: &PartitionConfig) -> Result<Vec<ClientShard>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("dataset", "cannot partition an empty dataset"));
    }
    let n_clients = config.num_clients;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gamma = Gamma::new(config.gamma, 1.0)
        .map_err(|e| Error::invalid("gamma", format!("invalid Dirichlet concentration: {e}")))?;

    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for class in 0..dataset.num_classes() {
        let mut class_indices: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.label(i) == class)
            .collect();
        if class_indices.is_empty() {
            continue;
        }
        class_indices.shuffle(&mut rng);

        // Dirichlet draw as normalized per-coordinate Gamma(gamma, 1).
        let draws: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        let proportions: Vec<f64> = if total > 0.0 && total.is_finite() {
            draws.iter().map(|d| d / total).collect()
        } else {
            vec![1.0 / n_clients as f64; n_clients]
        };

        let counts = largest_remainder_counts(&proportions, class_indices.len());
        let mut offset = 0;
        for (client, &count) in counts.iter().enumerate() {
            shards[client].extend_from_slice(&class_indices[offset..offset + count]);
            offset += count;
        }
    }

    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(client_id, mut indices)| {
            indices.sort_unstable();
            ClientShard { client_id, indices }
        })
        .collect())
}

/// Integer allocation of `total` items by fractional proportions; leftovers
/// go to the largest remainders (ties to the lower index).
fn largest_remainder_counts(proportions: &[f64], total: usize) -> Vec<usize> {
    let targets: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Natural-log entropy of a label histogram.
pub fn label_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}
