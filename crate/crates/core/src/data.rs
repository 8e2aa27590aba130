//! Labeled datasets, synthetic blobs and the non-IID client partitioner.
//!
//! The partitioner assigns client `i` to group `i % m` and gives it samples
//! from classes `i % m, (i+1) % m, ...` (three classes by default).

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

mod idx;

pub use idx::{load_idx, read_idx_images, read_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};

/// A dense row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("feature dimension must be positive".into()));
        }
        if num_classes < 2 {
            return Err(Error::Argument("a dataset needs at least two classes".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Consistency(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Consistency(format!("label {bad} outside [0, {num_classes})")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Consistency("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            dim,
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

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Copies the given rows (in the given order) into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset {
            features,
            dim: self.dim,
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Number of samples per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }

    /// Returns a copy with every label replaced by `f(label)`.
    pub fn map_labels(&self, f: impl Fn(usize) -> usize) -> Result<LabeledDataset> {
        let labels = self.labels.iter().map(|&l| f(l)).collect();
        LabeledDataset::new(self.features.clone(), self.dim, labels, self.num_classes)
    }

    /// Seeded split into `(head, tail)` where `head` holds
    /// `ceil(fraction * len)` samples.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Argument(format!("split fraction {fraction} outside [0, 1]")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut seed::rng(seed));
        let head = ((fraction * self.len() as f64).ceil() as usize).min(self.len());
        let (a, b) = order.split_at(head);
        Ok((self.subset(a), self.subset(b)))
    }
}

/// Whether a client follows the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Honest,
    Malicious,
}

/// A client's private training data.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: usize,
    pub data: LabeledDataset,
    pub role: Role,
}

impl ClientShard {
    /// Sample count `n_k`.
    pub fn n_k(&self) -> usize {
        self.data.len()
    }

    pub fn is_malicious(&self) -> bool {
        self.role == Role::Malicious
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub num_classes: usize,
    pub classes_per_client: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn new(num_clients: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            num_clients,
            num_classes,
            classes_per_client: 3,
            seed,
        }
    }

    /// Classes held by `client`, in group order.
    pub fn classes_of(&self, client: usize) -> Vec<usize> {
        let m = self.num_classes;
        let k = self.classes_per_client.min(m);
        (0..k).map(|j| (client + j) % m).collect()
    }

    /// Clients entitled to samples of `class`, ascending.
    pub fn entitled_clients(&self, class: usize) -> Vec<usize> {
        (0..self.num_clients)
            .filter(|&i| self.classes_of(i).contains(&class))
            .collect()
    }
}

/// Gaussian blobs around fixed per-class vertices.
///
/// Class `c` is centred at `3 * e_(c mod input_dim)` (scaled one-hot corner;
/// classes wrap onto `-3 * e_j` when there are more classes than dimensions)
/// and perturbed by isotropic Gaussian noise of standard deviation `spread`.
/// Samples are laid out class by class.
pub fn synth_blobs(
    num_classes: usize,
    samples_per_class: usize,
    input_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 || samples_per_class == 0 || input_dim == 0 {
        return Err(Error::Argument(
            "synth_blobs needs num_classes >= 2 and positive sample and dimension counts".into(),
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Argument(format!("invalid spread {spread}")));
    }
    if num_classes > 2 * input_dim {
        return Err(Error::Argument(format!(
            "{num_classes} classes need input_dim >= {}",
            num_classes.div_ceil(2)
        )));
    }
    let mut rng = seed::rng(seed);
    let n = num_classes * samples_per_class;
    let mut features = Vec::with_capacity(n * input_dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..num_classes {
        let axis = class % input_dim;
        let sign = if class < input_dim { 1.0 } else { -1.0 };
        for _ in 0..samples_per_class {
            for d in 0..input_dim {
                let centre = if d == axis { 3.0 * sign } else { 0.0 };
                let noise: f64 = StandardNormal.sample(&mut rng);
                features.push(centre + spread * noise);
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(features, input_dim, labels, num_classes)
}

/// Splits `dataset` across `spec.num_clients` clients by class group.
///
/// Each class's sample indices are shuffled with a per-class seeded stream
/// and cut into contiguous, equal chunks for the entitled clients in
/// ascending id order; the first `len % k` clients receive one extra sample.
/// Clients `0..malicious_count` are marked malicious.
pub fn partition_noniid(
    dataset: &LabeledDataset,
    spec: &PartitionSpec,
    malicious_count: usize,
) -> Result<Vec<ClientShard>> {
    if spec.num_clients == 0 || spec.classes_per_client == 0 {
        return Err(Error::Argument("partition needs clients and classes per client".into()));
    }
    if spec.num_classes != dataset.num_classes() {
        return Err(Error::Argument(format!(
            "partition spec has {} classes, dataset has {}",
            spec.num_classes,
            dataset.num_classes()
        )));
    }
    if spec.classes_per_client > spec.num_classes {
        return Err(Error::Argument("classes_per_client exceeds num_classes".into()));
    }
    if malicious_count > spec.num_clients {
        return Err(Error::Argument(format!(
            "{malicious_count} malicious clients out of {}",
            spec.num_clients
        )));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); spec.num_classes];
    for (i, &label) in dataset.labels().iter().enumerate() {
        by_class[label].push(i);
    }

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); spec.num_clients];
    for (class, indices) in by_class.iter_mut().enumerate() {
        let entitled = spec.entitled_clients(class);
        if indices.is_empty() {
            return Err(Error::Partition(format!("class {class} has no samples")));
        }
        if entitled.is_empty() {
            return Err(Error::Partition(format!(
                "class {class} is not held by any of the {} clients",
                spec.num_clients
            )));
        }
        if indices.len() < entitled.len() {
            return Err(Error::Partition(format!(
                "class {class} has {} samples for {} entitled clients",
                indices.len(),
                entitled.len()
            )));
        }
        indices.shuffle(&mut seed::stream_rng(
            spec.seed,
            seed::stream::PARTITION,
            &[class as u64],
        ));
        let base = indices.len() / entitled.len();
        let extra = indices.len() % entitled.len();
        let mut start = 0;
        for (slot, &client) in entitled.iter().enumerate() {
            let take = base + usize::from(slot < extra);
            assigned[client].extend_from_slice(&indices[start..start + take]);
            start += take;
        }
    }

    Ok(assigned
        .into_iter()
        .enumerate()
        .map(|(client_id, mut rows)| {
            rows.sort_unstable();
            ClientShard {
                client_id,
                data: dataset.subset(&rows),
                role: if client_id < malicious_count {
                    Role::Malicious
                } else {
                    Role::Honest
                },
            }
        })
        .collect())
}
