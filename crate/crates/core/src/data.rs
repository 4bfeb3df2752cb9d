//! In-memory datasets, synthetic Gaussian blobs, and client partitioning.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::seed::{stream_rng, Stream};
use crate::{Error, Result, Scalar, Tensor};

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    features: Vec<f32>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, features: Vec<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let row: usize = sample_shape.iter().product();
        if row == 0 || features.len() != row * labels.len() {
            return Err(Error::Shape(format!(
                "{} feature values for {} samples of shape {:?}",
                features.len(),
                labels.len(),
                sample_shape
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {} out of range for {} classes", bad, classes)));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Self { sample_shape, features, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    fn row_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let r = self.row_len();
        &self.features[i * r..(i + 1) * r]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.row_len());
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        Dataset {
            sample_shape: self.sample_shape.clone(),
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Mini-batch tensor `[indices.len(), sample_shape..]` and its labels.
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> (Tensor<S>, Vec<usize>) {
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        let mut data = Vec::with_capacity(indices.len() * self.row_len());
        for &i in indices {
            data.extend(self.sample(i).iter().map(|&v| S::from_f32(v)));
        }
        let t = Tensor::from_vec(&shape, data).expect("batch length matches shape");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The whole dataset as one batch.
    pub fn as_batch<S: Scalar>(&self) -> (Tensor<S>, Vec<usize>) {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all)
    }

    /// Shuffled split into `(train, test)` with `round(len * test_fraction)`
    /// test samples.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidArgument(format!("test fraction {} outside [0, 1)", test_fraction)));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut stream_rng(seed, Stream::Partition, u64::MAX, 0));
        let n_test = libm::round(self.len() as f64 * test_fraction) as usize;
        let (test, train) = idx.split_at(n_test);
        Ok((self.subset(train), self.subset(test)))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub dims: usize,
    pub samples: usize,
    #[serde(default = "default_cluster_std")]
    pub cluster_std: f64,
    #[serde(default = "default_center_box")]
    pub center_box: f64,
}

fn default_cluster_std() -> f64 {
    1.0
}

fn default_center_box() -> f64 {
    10.0
}

impl BlobSpec {
    pub fn new(classes: usize, dims: usize, samples: usize) -> Self {
        Self { classes, dims, samples, cluster_std: default_cluster_std(), center_box: default_center_box() }
    }
}

/// Isotropic Gaussian clusters, one per class, with centres drawn uniformly
/// from `[-center_box, center_box]^dims`. Classes are balanced to within one
/// sample and rows come out shuffled.
pub fn generate_blobs(spec: &BlobSpec, seed: u64) -> Result<Dataset> {
    if spec.classes == 0 || spec.dims == 0 || spec.samples == 0 {
        return Err(Error::InvalidArgument("blob classes, dims and samples must be positive".into()));
    }
    if spec.classes > spec.samples {
        return Err(Error::InvalidArgument(format!(
            "{} classes cannot be populated by {} samples",
            spec.classes, spec.samples
        )));
    }
    if !(spec.cluster_std >= 0.0) || !(spec.center_box > 0.0) {
        return Err(Error::InvalidArgument("cluster_std must be >= 0 and center_box > 0".into()));
    }
    let mut rng = stream_rng(seed, Stream::Dataset, 0, 0);
    let centers: Vec<f64> =
        (0..spec.classes * spec.dims).map(|_| rng.random_range(-spec.center_box..=spec.center_box)).collect();
    let mut labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, spec.cluster_std).map_err(|e| Error::InvalidArgument(format!("{}", e)))?;
    let mut features = Vec::with_capacity(spec.samples * spec.dims);
    for &l in &labels {
        for d in 0..spec.dims {
            features.push((centers[l * spec.dims + d] + noise.sample(&mut rng)) as f32);
        }
    }
    Dataset::new(vec![spec.dims], features, labels, spec.classes)
}

/// One client's share of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub client_id: u32,
    /// Row indices into the source dataset, ascending.
    pub indices: Vec<usize>,
    pub data: Dataset,
}

impl Partition {
    pub fn sample_count(&self) -> u64 {
        self.data.len() as u64
    }
}

fn build_partitions(ds: &Dataset, groups: Vec<Vec<usize>>) -> Vec<Partition> {
    groups
        .into_iter()
        .enumerate()
        .map(|(k, mut indices)| {
            indices.sort_unstable();
            let data = ds.subset(&indices);
            Partition { client_id: k as u32, indices, data }
        })
        .collect()
}

/// Shuffled equal split; sizes differ by at most one.
pub fn partition_iid(ds: &Dataset, n_clients: usize, seed: u64) -> Result<Vec<Partition>> {
    if n_clients == 0 {
        return Err(Error::InvalidArgument("at least one client is required".into()));
    }
    if n_clients > ds.len() {
        return Err(Error::InvalidArgument(format!("{} clients for {} samples", n_clients, ds.len())));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut stream_rng(seed, Stream::Partition, 0, 0));
    let base = ds.len() / n_clients;
    let extra = ds.len() % n_clients;
    let mut groups = Vec::with_capacity(n_clients);
    let mut start = 0;
    for k in 0..n_clients {
        let size = base + usize::from(k < extra);
        groups.push(idx[start..start + size].to_vec());
        start += size;
    }
    Ok(build_partitions(ds, groups))
}

pub const DIRICHLET_MAX_ATTEMPTS: u32 = 100;

/// Label-skewed split: for every class, the share each client receives is
/// drawn from a symmetric Dirichlet(`alpha`). Draws that leave a client
/// empty are repeated up to [`DIRICHLET_MAX_ATTEMPTS`] times.
pub fn partition_dirichlet(ds: &Dataset, n_clients: usize, alpha: f64, seed: u64) -> Result<Vec<Partition>> {
    if n_clients == 0 {
        return Err(Error::InvalidArgument("at least one client is required".into()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("dirichlet alpha must be positive, got {}", alpha)));
    }
    if n_clients > ds.len() {
        return Err(Error::InvalidArgument(format!("{} clients for {} samples", n_clients, ds.len())));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(format!("{}", e)))?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    for attempt in 0..DIRICHLET_MAX_ATTEMPTS {
        let mut rng = stream_rng(seed, Stream::Partition, 1, attempt as u64);
        let mut groups = vec![Vec::new(); n_clients];
        let mut degenerate = false;
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let weights: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) || !total.is_finite() {
                degenerate = true;
                break;
            }
            let n = members.len() as f64;
            let mut cumulative = 0.0;
            let mut start = 0;
            for (k, w) in weights.iter().enumerate() {
                cumulative += w / total;
                let end = if k + 1 == n_clients { members.len() } else { (libm::round(cumulative * n) as usize).min(members.len()) };
                groups[k].extend_from_slice(&members[start..end.max(start)]);
                start = end.max(start);
            }
        }
        if !degenerate && groups.iter().all(|g| !g.is_empty()) {
            return Ok(build_partitions(ds, groups));
        }
    }
    Err(Error::EmptyPartition(format!(
        "no non-empty dirichlet split for {} clients with alpha {} after {} attempts",
        n_clients, alpha, DIRICHLET_MAX_ATTEMPTS
    )))
}
