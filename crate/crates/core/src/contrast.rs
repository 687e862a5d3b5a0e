//! Batch construction and the training losses.
//!
//! A batch holds `P·K` sync groups; each group is one original sample plus
//! its `S` clothing-swapped variants, all carrying the original's pseudo
//! label. Group features occupy consecutive rows of the encoded batch.

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::clustering::PseudoLabeling;
use crate::numerics::{Matrix, NumericsError, Tape, Var};
use crate::world::Sample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContrastError {
    #[error("need {needed} clusters for a batch, only {available} available")]
    TooFewClusters { available: usize, needed: usize },
    #[error("temperature must be finite and > 0, got {0}")]
    InvalidTemperature(f64),
    #[error("group {group} has {found} features, expected {expected}")]
    MalformedGroup { group: usize, expected: usize, found: usize },
    #[error("cluster {id} has no candidates in the memory (memory covers {count})")]
    UnknownCluster { id: usize, count: usize },
    #[error("non-finite loss: l_q = {l_q}, l_s = {l_s}, alpha = {alpha}")]
    NonFinite { l_q: f64, l_s: f64, alpha: f64 },
    #[error("P and K must be >= 1")]
    InvalidBatchShape,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One drawn original: its training index and pseudo label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PkDraw {
    pub cluster: usize,
    pub sample: usize,
}

/// `P` distinct clusters uniformly without replacement, then `K` members of
/// each; members are drawn with replacement only when the cluster has fewer
/// than `K`. Output is cluster-major.
pub fn pk_sample<R: Rng + ?Sized>(
    labeling: &PseudoLabeling,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<PkDraw>, ContrastError> {
    if p == 0 || k == 0 {
        return Err(ContrastError::InvalidBatchShape);
    }
    let clusters = labeling.clusters();
    if clusters.len() < p {
        return Err(ContrastError::TooFewClusters { available: clusters.len(), needed: p });
    }
    let mut draws = Vec::with_capacity(p * k);
    for cluster in index::sample(rng, clusters.len(), p).into_iter() {
        let members = &clusters[cluster];
        if members.len() >= k {
            for i in index::sample(rng, members.len(), k).into_iter() {
                draws.push(PkDraw { cluster, sample: members[i] });
            }
        } else {
            for _ in 0..k {
                draws.push(PkDraw { cluster, sample: members[rng.gen_range(0..members.len())] });
            }
        }
    }
    Ok(draws)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyncGroup {
    /// Index of the original in the training set.
    pub sample_index: usize,
    pub pseudo_label: usize,
    pub original: Sample,
    pub synthetics: Vec<Sample>,
}

impl SyncGroup {
    pub fn size(&self) -> usize {
        1 + self.synthetics.len()
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainBatch {
    pub groups: Vec<SyncGroup>,
}

/// Where each group's rows live in the encoded batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSpan {
    pub pseudo_label: usize,
    pub start: usize,
    pub len: usize,
}

impl TrainBatch {
    pub fn num_features(&self) -> usize {
        self.groups.iter().map(SyncGroup::size).sum()
    }

    pub fn spans(&self) -> Vec<GroupSpan> {
        let mut start = 0;
        self.groups
            .iter()
            .map(|g| {
                let span = GroupSpan { pseudo_label: g.pseudo_label, start, len: g.size() };
                start += g.size();
                span
            })
            .collect()
    }

    /// Pseudo label of every feature row.
    pub fn row_labels(&self) -> Vec<usize> {
        self.groups.iter().flat_map(|g| std::iter::repeat_n(g.pseudo_label, g.size())).collect()
    }

    /// Raw inputs, one row per feature: each original followed by its synthetics.
    pub fn inputs(&self) -> Result<Matrix, NumericsError> {
        let rows: Vec<&[f64]> = self
            .groups
            .iter()
            .flat_map(|g| std::iter::once(&g.original).chain(&g.synthetics))
            .map(|s| s.raw.as_slice())
            .collect();
        Matrix::from_rows(&rows)
    }
}

/// Contrast targets: a bank of unit rows and, per cluster, which rows are positives.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidates {
    pub bank: Matrix,
    pub positives: Vec<Vec<usize>>,
}

impl Candidates {
    /// Average and hardest banks stacked: cluster `i` owns rows `i` and `N + i`.
    pub fn dual(average: &Matrix, hardest: &Matrix) -> Self {
        let n = average.rows();
        let mut rows: Vec<&[f64]> = average.iter_rows().collect();
        rows.extend(hardest.iter_rows());
        Candidates {
            bank: Matrix::from_rows(&rows).expect("equal widths"),
            positives: (0..n).map(|i| vec![i, n + i]).collect(),
        }
    }

    /// One bank, one entry per cluster.
    pub fn single(bank: &Matrix) -> Self {
        Candidates { bank: bank.clone(), positives: (0..bank.rows()).map(|i| vec![i]).collect() }
    }

    /// Per-instance bank; every slot of the query's cluster is a positive.
    pub fn instances(bank: &Matrix, slot_labels: &[usize], num_clusters: usize) -> Self {
        let mut positives = vec![Vec::new(); num_clusters];
        for (slot, &c) in slot_labels.iter().enumerate() {
            positives[c].push(slot);
        }
        Candidates { bank: bank.clone(), positives }
    }

    pub fn len(&self) -> usize {
        self.bank.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.bank.rows() == 0
    }
}

/// Mean over all (query, positive) pairs of
/// `-log( exp(f·f⁺/τ) / Σ_m exp(f·f_m/τ) )`, the sum running over every
/// candidate row.
pub fn info_nce(
    tape: &mut Tape,
    features: Var,
    row_labels: &[usize],
    candidates: &Candidates,
    tau: f64,
) -> Result<Var, ContrastError> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(ContrastError::InvalidTemperature(tau));
    }
    let mut picks = Vec::new();
    for (row, &label) in row_labels.iter().enumerate() {
        let pos = candidates
            .positives
            .get(label)
            .filter(|p| !p.is_empty())
            .ok_or(ContrastError::UnknownCluster { id: label, count: candidates.positives.len() })?;
        picks.extend(pos.iter().map(|&c| (row, c)));
    }
    let bank = tape.leaf(candidates.bank.clone());
    let sims = tape.matmul_t(features, bank);
    let logits = tape.scale(sims, 1.0 / tau);
    let log_probs = tape.log_softmax_rows(logits);
    let picked = tape.pick(log_probs, picks);
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

/// How the summed pairwise KL of the self-identity loss is normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SelfIdentityNorm {
    /// Mean over ordered pairs `a != b`.
    #[default]
    OrderedPairs,
    /// Divide by the number of features `P·K·(S+1)` instead.
    PerFeature,
}

/// Pairwise `KL(softmax(f_a) || softmax(f_b))` over ordered pairs `a != b`
/// inside every group.
pub fn self_identity_loss(
    tape: &mut Tape,
    features: Var,
    spans: &[GroupSpan],
    group_size: usize,
    norm: SelfIdentityNorm,
) -> Result<Var, ContrastError> {
    let mut left = Vec::new();
    let mut right = Vec::new();
    for (group, span) in spans.iter().enumerate() {
        if span.len != group_size || group_size < 2 {
            return Err(ContrastError::MalformedGroup { group, expected: group_size, found: span.len });
        }
        for a in span.start..span.start + span.len {
            for b in span.start..span.start + span.len {
                if a != b {
                    left.push(a);
                    right.push(b);
                }
            }
        }
    }
    let pairs = left.len();
    let log_p = tape.log_softmax_rows(features);
    let la = tape.gather_rows(log_p, left);
    let lb = tape.gather_rows(log_p, right);
    let pa = tape.exp(la);
    let diff = tape.sub(la, lb);
    let terms = tape.mul(pa, diff);
    let per_pair = tape.sum_rows(terms);
    let total = tape.sum(per_pair);
    let denom = match norm {
        SelfIdentityNorm::OrderedPairs => pairs,
        SelfIdentityNorm::PerFeature => spans.len() * group_size,
    };
    Ok(tape.scale(total, 1.0 / denom as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_q: f64,
    pub l_s: f64,
    pub alpha: f64,
    pub total: f64,
}

pub fn total_loss(l_q: f64, l_s: f64, alpha: f64) -> Result<LossBreakdown, ContrastError> {
    let total = l_q + alpha * l_s;
    if !(l_q.is_finite() && l_s.is_finite() && alpha.is_finite() && alpha >= 0.0 && total.is_finite()) {
        return Err(ContrastError::NonFinite { l_q, l_s, alpha });
    }
    Ok(LossBreakdown { l_q, l_s, alpha, total })
}

/// Records `l_q + α·l_s` on the tape; the returned breakdown matches the
/// root's value exactly.
pub fn record_total(tape: &mut Tape, l_q: Var, l_s: Option<Var>, alpha: f64) -> Result<(Var, LossBreakdown), ContrastError> {
    let q = tape.value(l_q).get(0, 0);
    match l_s {
        Some(ls) => {
            let s = tape.value(ls).get(0, 0);
            let breakdown = total_loss(q, s, alpha)?;
            let weighted = tape.scale(ls, alpha);
            let root = tape.add(l_q, weighted);
            debug_assert_eq!(tape.value(root).get(0, 0), breakdown.total);
            Ok((root, breakdown))
        }
        None => Ok((l_q, total_loss(q, 0.0, alpha)?)),
    }
}
