//! Cluster feature dictionaries and their momentum updates.
//!
//! [`DualMemory`] keeps two unit vectors per pseudo-identity: a running
//! average of batch features and a running "hardest" feature (the batch
//! member with the largest softmax-KL from the current entry). Entries are
//! renormalized after every update.
//!
//! [`InstanceMemory`] keeps one entry per clustered training sample, for the
//! ablation that skips cluster-level sampling.

use rand::Rng;
use thiserror::Error;

use crate::numerics::{feature_kl, Matrix, NumericsError, Vector};
use crate::numerics::l2_normalize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
    #[error("no batch features for the update")]
    EmptyBatch,
    #[error("unknown cluster {id} (memory has {count})")]
    UnknownCluster { id: usize, count: usize },
    #[error("expected {expected} batch features, found {found}")]
    WrongBatchSize { expected: usize, found: usize },
    #[error("momentum must lie in [0, 1], got {0}")]
    InvalidMomentum(f64),
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `m·old + (1-m)·new`, before renormalization.
pub fn momentum_blend(old: &[f64], new: &[f64], momentum: f64) -> Vec<f64> {
    old.iter().zip(new).map(|(o, n)| momentum * o + (1.0 - momentum) * n).collect()
}

fn blend_normalized(old: &[f64], new: &[f64], momentum: f64) -> Result<Vec<f64>, MemoryError> {
    let mixed = Vector::new(momentum_blend(old, new, momentum))?;
    Ok(l2_normalize(&mixed)?.into_vec())
}

fn check_momentum(momentum: f64) -> Result<(), MemoryError> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(MemoryError::InvalidMomentum(momentum));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualMemory {
    average: Matrix,
    hardest: Matrix,
    momentum: f64,
}

/// Index of the candidate with the largest `KL(softmax(f) || softmax(entry))`;
/// ties go to the lowest index.
pub fn select_hardest(entry: &[f64], candidates: &[&[f64]]) -> Result<usize, MemoryError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, f) in candidates.iter().enumerate() {
        let d = feature_kl(f, entry)?;
        if best.is_none_or(|(_, b)| d > b) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i).ok_or(MemoryError::EmptyBatch)
}

impl DualMemory {
    /// Draws one member of each cluster uniformly; that one feature seeds
    /// both banks.
    pub fn init<R: Rng + ?Sized>(
        clusters: &[Vec<usize>],
        features: &Matrix,
        momentum: f64,
        rng: &mut R,
    ) -> Result<Self, MemoryError> {
        check_momentum(momentum)?;
        let mut average = Matrix::zeros(clusters.len(), features.cols());
        for (c, members) in clusters.iter().enumerate() {
            if members.is_empty() {
                return Err(MemoryError::EmptyCluster(c));
            }
            let pick = members[rng.gen_range(0..members.len())];
            average.row_mut(c).copy_from_slice(features.row(pick));
        }
        let hardest = average.clone();
        Ok(DualMemory { average, hardest, momentum })
    }

    pub fn from_banks(average: Matrix, hardest: Matrix, momentum: f64) -> Result<Self, MemoryError> {
        check_momentum(momentum)?;
        if average.shape() != hardest.shape() {
            return Err(MemoryError::DimensionMismatch { expected: average.rows(), found: hardest.rows() });
        }
        Ok(DualMemory { average, hardest, momentum })
    }

    pub fn num_clusters(&self) -> usize {
        self.average.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.average.cols()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn average(&self) -> &Matrix {
        &self.average
    }

    pub fn hardest(&self) -> &Matrix {
        &self.hardest
    }

    fn check(&self, cluster: usize, batch: &[&[f64]]) -> Result<(), MemoryError> {
        if cluster >= self.num_clusters() {
            return Err(MemoryError::UnknownCluster { id: cluster, count: self.num_clusters() });
        }
        if let Some(f) = batch.iter().find(|f| f.len() != self.feature_dim()) {
            return Err(MemoryError::DimensionMismatch { expected: self.feature_dim(), found: f.len() });
        }
        Ok(())
    }

    /// Moves `hardest[cluster]` toward the batch feature that diverges most
    /// from it. Returns the index of the selected feature.
    pub fn update_hard(&mut self, cluster: usize, batch: &[&[f64]]) -> Result<usize, MemoryError> {
        self.check(cluster, batch)?;
        let pick = select_hardest(self.hardest.row(cluster), batch)?;
        let updated = blend_normalized(self.hardest.row(cluster), batch[pick], self.momentum)?;
        self.hardest.row_mut(cluster).copy_from_slice(&updated);
        Ok(pick)
    }

    /// Moves `average[cluster]` toward the batch mean. The batch must hold
    /// the `(S+1)·K` original and synthetic features of this cluster.
    pub fn update_average(
        &mut self,
        cluster: usize,
        batch: &[&[f64]],
        synthetic_per_sample: usize,
        instances: usize,
    ) -> Result<(), MemoryError> {
        self.check(cluster, batch)?;
        let expected = (synthetic_per_sample + 1) * instances;
        if batch.len() != expected || expected == 0 {
            return Err(MemoryError::WrongBatchSize { expected, found: batch.len() });
        }
        let mut mean = vec![0.0; self.feature_dim()];
        for f in batch {
            for (m, v) in mean.iter_mut().zip(*f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= expected as f64);
        let updated = blend_normalized(self.average.row(cluster), &mean, self.momentum)?;
        self.average.row_mut(cluster).copy_from_slice(&updated);
        Ok(())
    }
}

/// One memory slot per clustered training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMemory {
    features: Matrix,
    /// Cluster of each slot.
    labels: Vec<usize>,
    /// Training-sample index of each slot.
    samples: Vec<usize>,
    /// Slot of each training sample, `None` for noise.
    slot_of: Vec<Option<usize>>,
    momentum: f64,
}

impl InstanceMemory {
    /// Seeds each slot with that sample's current feature.
    pub fn init(labels: &[Option<usize>], features: &Matrix, momentum: f64) -> Result<Self, MemoryError> {
        check_momentum(momentum)?;
        let samples: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
        let mut slot_of = vec![None; labels.len()];
        let mut store = Matrix::zeros(samples.len(), features.cols());
        for (slot, &i) in samples.iter().enumerate() {
            store.row_mut(slot).copy_from_slice(features.row(i));
            slot_of[i] = Some(slot);
        }
        Ok(InstanceMemory {
            features: store,
            labels: samples.iter().map(|&i| labels[i].expect("filtered")).collect(),
            samples,
            slot_of,
            momentum,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn slot_labels(&self) -> &[usize] {
        &self.labels
    }

    /// Slots belonging to `cluster`.
    pub fn slots_of_cluster(&self, cluster: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, l)| **l == cluster).map(|(s, _)| s).collect()
    }

    pub fn update(&mut self, sample: usize, feature: &[f64]) -> Result<(), MemoryError> {
        let slot = self
            .slot_of
            .get(sample)
            .copied()
            .flatten()
            .ok_or(MemoryError::UnknownCluster { id: sample, count: self.len() })?;
        if feature.len() != self.features.cols() {
            return Err(MemoryError::DimensionMismatch { expected: self.features.cols(), found: feature.len() });
        }
        let updated = blend_normalized(self.features.row(slot), feature, self.momentum)?;
        self.features.row_mut(slot).copy_from_slice(&updated);
        Ok(())
    }
}
