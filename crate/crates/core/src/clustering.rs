//! DBSCAN pseudo-labels under cosine distance.
//!
//! Conventions:
//! - a point is a neighbor of itself, so `min_samples = 4` means self + 3;
//! - `q` is in the neighborhood of `p` iff `cosine_distance(p, q) <= eps`;
//! - a border point reachable from several clusters joins the cluster of its
//!   lowest-index core neighbor;
//! - cluster ids follow the lowest core index of each cluster.

use std::collections::VecDeque;
use std::io::{self, Write};

use thiserror::Error;

use crate::numerics::{dot, Matrix, NumericsError, ZERO_NORM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("eps must be finite and > 0, got {0}")]
    InvalidEps(f64),
    #[error("min_samples must be >= 1")]
    InvalidMinSamples,
    #[error("no features to cluster")]
    Empty,
    #[error("unknown cluster {id} (have {count})")]
    UnknownCluster { id: usize, count: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabeling {
    labels: Vec<Option<usize>>,
    num_clusters: usize,
}

impl PseudoLabeling {
    /// Validates that ids are exactly `0..N` with no gaps.
    pub fn from_labels(labels: Vec<Option<usize>>) -> Result<Self, ClusterError> {
        let num_clusters = labels.iter().flatten().map(|l| l + 1).max().unwrap_or(0);
        let mut seen = vec![false; num_clusters];
        for l in labels.iter().flatten() {
            seen[*l] = true;
        }
        if let Some(id) = seen.iter().position(|s| !s) {
            return Err(ClusterError::UnknownCluster { id, count: num_clusters });
        }
        Ok(PseudoLabeling { labels, num_clusters })
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn label(&self, sample: usize) -> Option<usize> {
        self.labels[sample]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn num_noise(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    pub fn num_clustered(&self) -> usize {
        self.len() - self.num_noise()
    }

    /// Sample indices of `cluster_id`, ascending.
    pub fn cluster_members(&self, cluster_id: usize) -> Result<Vec<usize>, ClusterError> {
        if cluster_id >= self.num_clusters {
            return Err(ClusterError::UnknownCluster { id: cluster_id, count: self.num_clusters });
        }
        Ok(self.labels.iter().enumerate().filter(|(_, l)| **l == Some(cluster_id)).map(|(i, _)| i).collect())
    }

    /// Members of every cluster, indexed by cluster id.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                out[*c].push(i);
            }
        }
        out
    }

    /// Relabels clusters in order of first appearance, for comparisons that
    /// should ignore cluster-id permutations.
    pub fn canonical(&self) -> Vec<Option<usize>> {
        let mut map = vec![None; self.num_clusters];
        let mut next = 0;
        self.labels
            .iter()
            .map(|l| {
                l.map(|c| {
                    *map[c].get_or_insert_with(|| {
                        next += 1;
                        next - 1
                    })
                })
            })
            .collect()
    }

    /// `sample_index,label` rows; noise is written as `-1`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "sample_index,label")?;
        for (i, l) in self.labels.iter().enumerate() {
            match l {
                Some(c) => writeln!(w, "{i},{c}")?,
                None => writeln!(w, "{i},-1")?,
            }
        }
        Ok(())
    }
}

/// Cosine distances between all row pairs, `n x n`, symmetric.
///
/// Uses the same arithmetic as [`crate::numerics::cosine_distance`], so the
/// values are bit-identical to calling it pairwise.
pub fn pairwise_cosine(features: &Matrix) -> Result<Matrix, NumericsError> {
    let n = features.rows();
    let norms: Vec<f64> = features.iter_rows().map(|r| dot(r, r).sqrt()).collect();
    if norms.iter().any(|v| *v < ZERO_NORM) {
        return Err(NumericsError::ZeroVector);
    }
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let cos = (dot(features.row(i), features.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            let d = 1.0 - cos;
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    Ok(out)
}

pub fn dbscan(features: &Matrix, eps: f64, min_samples: usize) -> Result<PseudoLabeling, ClusterError> {
    if !eps.is_finite() || eps <= 0.0 {
        return Err(ClusterError::InvalidEps(eps));
    }
    if min_samples == 0 {
        return Err(ClusterError::InvalidMinSamples);
    }
    let n = features.rows();
    if n == 0 {
        return Err(ClusterError::Empty);
    }
    let dist = pairwise_cosine(features)?;
    let neighbors: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&j| dist.get(i, j) <= eps).collect()).collect();
    let is_core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_samples).collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut num_clusters = 0;
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if !is_core[seed] || labels[seed].is_some() {
            continue;
        }
        let id = num_clusters;
        num_clusters += 1;
        labels[seed] = Some(id);
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if is_core[q] && labels[q].is_none() {
                    labels[q] = Some(id);
                    queue.push_back(q);
                }
            }
        }
    }
    for i in 0..n {
        if !is_core[i] {
            // neighbor lists are ascending, so the first core hit is the lowest index
            labels[i] = neighbors[i].iter().find(|&&j| is_core[j]).and_then(|&j| labels[j]);
        }
    }
    Ok(PseudoLabeling { labels, num_clusters })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine_distance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute force: union-find over core-core edges, borders by scanning
    /// cores in index order.
    fn oracle(features: &Matrix, eps: f64, m: usize) -> Vec<Option<usize>> {
        let n = features.rows();
        let within = |i: usize, j: usize| cosine_distance(features.row(i), features.row(j)).unwrap() <= eps;
        let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| within(i, j)).count() >= m).collect();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            p[x] = r;
            r
        }
        for i in 0..n {
            for j in 0..n {
                if core[i] && core[j] && within(i, j) {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        (0..n)
            .map(|i| {
                if core[i] {
                    Some(find(&mut parent, i))
                } else {
                    (0..n).find(|&j| core[j] && within(i, j)).map(|j| find(&mut parent, j))
                }
            })
            .collect()
    }

    fn canonical(labels: &[Option<usize>]) -> Vec<Option<usize>> {
        let mut map = std::collections::HashMap::new();
        labels
            .iter()
            .map(|l| l.map(|c| {
                let next = map.len();
                *map.entry(c).or_insert(next)
            }))
            .collect()
    }

    fn unit_rows(rng: &mut ChaCha8Rng, centers: &[Vec<f64>], per: usize, spread: f64) -> Matrix {
        let mut rows = Vec::new();
        for c in centers {
            for _ in 0..per {
                let v: Vec<f64> = c.iter().map(|x| x + spread * rng.gen_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                rows.push(v.into_iter().map(|x| x / n).collect::<Vec<f64>>());
            }
        }
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn two_orthogonal_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = unit_rows(&mut rng, &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], 10, 0.01);
        let labels = dbscan(&f, 0.4, 4).unwrap();
        assert_eq!(labels.num_clusters(), 2);
        assert_eq!(labels.num_noise(), 0);
        assert_eq!(labels.canonical(), canonical(&oracle(&f, 0.4, 4)));
        assert_eq!(labels.cluster_members(0).unwrap(), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn single_point_is_noise() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let labels = dbscan(&f, 0.4, 4).unwrap();
        assert_eq!(labels.labels(), &[None]);
        assert_eq!(labels.num_clusters(), 0);
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let f = Matrix::from_rows(&vec![vec![0.6, 0.8]; 5]).unwrap();
        let labels = dbscan(&f, 0.1, 4).unwrap();
        assert_eq!(labels.num_clusters(), 1);
        assert_eq!(labels.num_noise(), 0);
    }

    #[test]
    fn errors() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(dbscan(&f, 0.0, 4), Err(ClusterError::InvalidEps(0.0)));
        assert_eq!(dbscan(&f, 0.4, 0), Err(ClusterError::InvalidMinSamples));
        assert_eq!(dbscan(&Matrix::zeros(0, 2), 0.4, 4), Err(ClusterError::Empty));
        let z = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(dbscan(&z, 0.4, 1), Err(ClusterError::Numerics(NumericsError::ZeroVector))));
    }

    #[test]
    fn members_lookup() {
        let l = PseudoLabeling::from_labels(vec![Some(0), Some(1), Some(0), None]).unwrap();
        assert_eq!(l.cluster_members(0).unwrap(), vec![0, 2]);
        assert_eq!(l.cluster_members(1).unwrap(), vec![1]);
        assert_eq!(l.cluster_members(5), Err(ClusterError::UnknownCluster { id: 5, count: 2 }));
        assert!(PseudoLabeling::from_labels(vec![Some(0), Some(2)]).is_err());
        let mut csv = Vec::new();
        l.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "sample_index,label\n0,0\n1,1\n2,0\n3,-1\n");
    }

    #[test]
    fn border_point_goes_to_lowest_core() {
        // cores 0..=3 near angle 0, cores 4..=7 near angle 1.0 rad; point 8 in between
        let angles = [0.0, 0.01, 0.02, 0.04, 1.0, 0.99, 0.98, 0.96, 0.5];
        let rows: Vec<Vec<f64>> = angles.iter().map(|a: &f64| vec![a.cos(), a.sin()]).collect();
        let f = Matrix::from_rows(&rows).unwrap();
        // 1 - cos(0.46) ≈ 0.104, 1 - cos(0.48) ≈ 0.113: point 8 reaches cores 3 and 7 only
        let labels = dbscan(&f, 0.11, 4).unwrap();
        assert_eq!(labels.num_clusters(), 2);
        assert_eq!(labels.label(8), labels.label(3));
        assert_ne!(labels.label(8), labels.label(7));
        assert_eq!(labels.canonical(), canonical(&oracle(&f, 0.11, 4)));
    }

    #[test]
    fn agrees_with_oracle_on_random_clouds() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = 4;
            let centers: Vec<Vec<f64>> =
                (0..5).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let f = unit_rows(&mut rng, &centers, 12, 0.5);
            for eps in [0.05, 0.2, 0.4] {
                for m in [2, 4] {
                    let got = dbscan(&f, eps, m).unwrap();
                    assert_eq!(got.canonical(), canonical(&oracle(&f, eps, m)), "seed {seed} eps {eps} m {m}");
                }
            }
        }
    }

    #[test]
    fn permutation_changes_only_border_tie_breaks() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let centers: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let f = unit_rows(&mut rng, &centers, 15, 0.6);
        let (eps, m) = (0.15, 4);
        let base = dbscan(&f, eps, m).unwrap();
        let mut perm: Vec<usize> = (0..f.rows()).collect();
        perm.reverse();
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| f.row(i).to_vec()).collect();
        let pf = Matrix::from_rows(&rows).unwrap();
        let permuted = dbscan(&pf, eps, m).unwrap();
        // map permuted labels back to original sample order
        let back: Vec<Option<usize>> = {
            let mut v = vec![None; f.rows()];
            for (new, &old) in perm.iter().enumerate() {
                v[old] = permuted.label(new);
            }
            v
        };
        let within = |i: usize, j: usize| cosine_distance(f.row(i), f.row(j)).unwrap() <= eps;
        let n = f.rows();
        let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| within(i, j)).count() >= m).collect();
        // same noise set, same partition of core points
        for i in 0..n {
            assert_eq!(base.label(i).is_none(), back[i].is_none());
            for j in 0..n {
                if core[i] && core[j] {
                    assert_eq!(base.label(i) == base.label(j), back[i] == back[j]);
                }
            }
        }
        // the permuted run follows the same rule in its own index order
        assert_eq!(permuted.canonical(), canonical(&oracle(&pf, eps, m)));
    }
}
