//! Retrieval metrics: CMC rank-k and mAP under the clothing-change and
//! same-clothing protocols.
//!
//! Every (query, gallery) pair gets a [`MatchFlag`]. `Ignore` entries are
//! removed from the ranked list entirely; they neither count as hits nor push
//! real matches down.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::numerics::{cosine_distance, Matrix, NumericsError, Vector};
use crate::world::SplitSetting;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("queries of identities {0:?} have no valid gallery match")]
    NoValidMatch(Vec<u32>),
    #[error("empty query or gallery set")]
    Empty,
    #[error("ranks must be non-empty, >= 1 and strictly ascending")]
    InvalidRanks,
    #[error("distance matrix is {rows}x{cols} but flags are {flag_rows}x{flag_cols}")]
    ShapeMismatch { rows: usize, cols: usize, flag_rows: usize, flag_cols: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalRole {
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub feature: Vector,
    pub identity_id: u32,
    pub clothing_id: u32,
    pub camera_id: u32,
    pub role: EvalRole,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shot {
    /// One gallery record per identity.
    Single,
    Multi,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalProtocol {
    pub setting: SplitSetting,
    pub shot: Shot,
    /// Drop same-identity gallery entries taken by the query's camera.
    pub exclude_same_camera: bool,
    pub ranks: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            setting: SplitSetting::ClothingChange,
            shot: Shot::Single,
            exclude_same_camera: true,
            ranks: vec![1, 5, 10, 20],
            seed: 0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<(), EvalError> {
        validate_ranks(&self.ranks)
    }
}

fn validate_ranks(ranks: &[usize]) -> Result<(), EvalError> {
    if ranks.is_empty() || ranks[0] == 0 || ranks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::InvalidRanks);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchFlag {
    Match,
    NonMatch,
    Ignore,
}

/// Flag for one pair under the protocol.
pub fn match_flag(query: &EvalRecord, gallery: &EvalRecord, protocol: &EvalProtocol) -> MatchFlag {
    if query.identity_id != gallery.identity_id {
        return MatchFlag::NonMatch;
    }
    if protocol.exclude_same_camera && query.camera_id == gallery.camera_id {
        return MatchFlag::Ignore;
    }
    let same_clothes = query.clothing_id == gallery.clothing_id;
    match (protocol.setting, same_clothes) {
        (SplitSetting::ClothingChange, false) | (SplitSetting::SameClothing, true) => MatchFlag::Match,
        _ => MatchFlag::Ignore,
    }
}

/// Queries and gallery as indices into the input records, plus the flag matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolSplit {
    pub queries: Vec<usize>,
    pub gallery: Vec<usize>,
    pub flags: Vec<Vec<MatchFlag>>,
}

pub fn build_protocol_split<R: Rng + ?Sized>(
    records: &[EvalRecord],
    protocol: &EvalProtocol,
    rng: &mut R,
) -> Result<ProtocolSplit, EvalError> {
    protocol.validate()?;
    let queries: Vec<usize> = (0..records.len()).filter(|&i| records[i].role == EvalRole::Query).collect();
    let mut gallery: Vec<usize> = (0..records.len()).filter(|&i| records[i].role == EvalRole::Gallery).collect();
    if queries.is_empty() || gallery.is_empty() {
        return Err(EvalError::Empty);
    }
    if protocol.shot == Shot::Single {
        let mut by_identity: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &g in &gallery {
            by_identity.entry(records[g].identity_id).or_default().push(g);
        }
        gallery = by_identity.values().map(|members| members[rng.gen_range(0..members.len())]).collect();
    }
    let flags: Vec<Vec<MatchFlag>> = queries
        .iter()
        .map(|&q| gallery.iter().map(|&g| match_flag(&records[q], &records[g], protocol)).collect())
        .collect();
    let mut missing: Vec<u32> = queries
        .iter()
        .zip(&flags)
        .filter(|(_, row)| !row.contains(&MatchFlag::Match))
        .map(|(&q, _)| records[q].identity_id)
        .collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        missing.dedup();
        return Err(EvalError::NoValidMatch(missing));
    }
    Ok(ProtocolSplit { queries, gallery, flags })
}

/// `|Q|×|G|` cosine distances between feature rows.
pub fn distance_matrix(queries: &Matrix, gallery: &Matrix) -> Result<Matrix, EvalError> {
    if queries.rows() == 0 || gallery.rows() == 0 {
        return Err(EvalError::Empty);
    }
    let mut out = Matrix::zeros(queries.rows(), gallery.rows());
    for (i, q) in queries.iter_rows().enumerate() {
        for (j, g) in gallery.iter_rows().enumerate() {
            out.set(i, j, cosine_distance(q, g)?);
        }
    }
    Ok(out)
}

fn check_shapes(distmat: &Matrix, flags: &[Vec<MatchFlag>]) -> Result<(), EvalError> {
    let flag_cols = flags.first().map_or(0, Vec::len);
    if flags.len() != distmat.rows() || flags.iter().any(|r| r.len() != distmat.cols()) {
        return Err(EvalError::ShapeMismatch {
            rows: distmat.rows(),
            cols: distmat.cols(),
            flag_rows: flags.len(),
            flag_cols,
        });
    }
    if distmat.rows() == 0 || distmat.cols() == 0 {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Ranked hit pattern for every query: `true` where a match sits, ignored
/// entries dropped. Ties go to the lower gallery index.
fn ranked_hits(distmat: &Matrix, flags: &[Vec<MatchFlag>]) -> Result<Vec<Vec<bool>>, EvalError> {
    check_shapes(distmat, flags)?;
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(flags.len());
    for (q, row) in flags.iter().enumerate() {
        let dist = distmat.row(q);
        let mut order: Vec<usize> = (0..row.len()).filter(|&g| row[g] != MatchFlag::Ignore).collect();
        order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        let hits: Vec<bool> = order.iter().map(|&g| row[g] == MatchFlag::Match).collect();
        if !hits.contains(&true) {
            missing.push(q as u32);
        }
        out.push(hits);
    }
    if !missing.is_empty() {
        return Err(EvalError::NoValidMatch(missing));
    }
    Ok(out)
}

/// Fraction of queries with a match in the top `k`, for each requested `k`.
///
/// `NoValidMatch` here carries query row indices, since the flags alone
/// don't know identities.
pub fn cmc(distmat: &Matrix, flags: &[Vec<MatchFlag>], ranks: &[usize]) -> Result<Vec<f64>, EvalError> {
    validate_ranks(ranks)?;
    let hits = ranked_hits(distmat, flags)?;
    let first: Vec<usize> = hits.iter().map(|h| h.iter().position(|&x| x).expect("checked")).collect();
    let n = first.len() as f64;
    Ok(ranks.iter().map(|&k| first.iter().filter(|&&p| p < k).count() as f64 / n).collect())
}

pub fn average_precisions(distmat: &Matrix, flags: &[Vec<MatchFlag>]) -> Result<Vec<f64>, EvalError> {
    let hits = ranked_hits(distmat, flags)?;
    Ok(hits
        .iter()
        .map(|h| {
            let mut found = 0usize;
            let mut sum = 0.0;
            for (pos, _) in h.iter().enumerate().filter(|(_, &x)| x) {
                found += 1;
                sum += found as f64 / (pos + 1) as f64;
            }
            sum / found as f64
        })
        .collect())
}

pub fn mean_ap(distmat: &Matrix, flags: &[Vec<MatchFlag>]) -> Result<f64, EvalError> {
    let aps = average_precisions(distmat, flags)?;
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// `(k, accuracy)` in ascending `k`.
    pub cmc: Vec<(usize, f64)>,
    pub map: f64,
    pub per_query_ap: Vec<f64>,
}

impl Metrics {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.cmc.iter().find(|(r, _)| *r == k).map(|(_, v)| *v)
    }

    /// `rankK=value` lines followed by `mAP=value`.
    pub fn report(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.cmc {
            writeln!(s, "rank{k}={v}").expect("string");
        }
        writeln!(s, "mAP={}", self.map).expect("string");
        s
    }

    pub fn write_report(&self, path: impl AsRef<Path>) -> io::Result<()> {
        fs::write(path, self.report())
    }

    pub fn write_ap_csv(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let mut s = String::from("query,ap\n");
        for (i, ap) in self.per_query_ap.iter().enumerate() {
            writeln!(s, "{i},{ap}").expect("string");
        }
        fs::write(path, s)
    }
}

/// Split, distances and metrics in one go.
pub fn evaluate<R: Rng + ?Sized>(
    records: &[EvalRecord],
    protocol: &EvalProtocol,
    rng: &mut R,
) -> Result<Metrics, EvalError> {
    let split = build_protocol_split(records, protocol, rng)?;
    let rows = |idx: &[usize]| {
        let r: Vec<&[f64]> = idx.iter().map(|&i| records[i].feature.as_slice()).collect();
        Matrix::from_rows(&r)
    };
    let distmat = distance_matrix(&rows(&split.queries)?, &rows(&split.gallery)?)?;
    let acc = cmc(&distmat, &split.flags, &protocol.ranks)?;
    let per_query_ap = average_precisions(&distmat, &split.flags)?;
    let map = per_query_ap.iter().sum::<f64>() / per_query_ap.len() as f64;
    Ok(Metrics { cmc: protocol.ranks.iter().copied().zip(acc).collect(), map, per_query_ap })
}
