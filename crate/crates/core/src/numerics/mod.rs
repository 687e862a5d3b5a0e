//! Dense vector math, softmax/KL, and a small reverse-mode tape.
//!
//! Everything is `f64`. Features are compared as distributions by mapping
//! them through [`softmax`] first; [`kl_divergence`] itself only accepts
//! proper [`Distribution`]s.

mod matrix;
pub mod tape;

pub use matrix::{dot, Matrix};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Tolerance on `Σ p = 1` for a [`Distribution`].
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("vector norm below {ZERO_NORM:e}")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("q[{index}] = 0 where p[{index}] > 0")]
    SupportViolation { index: usize },
    #[error("not a probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("backward root must be a 1x1 node, got {rows}x{cols}")]
    NotScalarRoot { rows: usize, cols: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

/// Fixed-dimension real vector with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self, NumericsError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite("Vector::new"));
        }
        Ok(Vector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        dot(&self.0, &other.0)
    }
}

impl AsRef<[f64]> for Vector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Non-negative entries summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, NumericsError> {
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(NumericsError::InvalidDistribution(format!("entry {bad}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(NumericsError::InvalidDistribution(format!("sum {total}")));
        }
        Ok(Distribution(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &Vector) -> Result<Vector, NumericsError> {
    let n = v.norm();
    if n < ZERO_NORM {
        return Err(NumericsError::ZeroVector);
    }
    Ok(Vector(v.0.iter().map(|x| x / n).collect()))
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64, NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    let (na, nb) = (norm(a), norm(b));
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Err(NumericsError::ZeroVector);
    }
    let cos = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

pub fn softmax(v: &[f64]) -> Distribution {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Distribution(exps.into_iter().map(|e| e / total).collect())
}

/// `Σ p_i ln(p_i / q_i)` with `0 · ln(0/q) = 0`.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64, NumericsError> {
    if p.dim() != q.dim() {
        return Err(NumericsError::DimensionMismatch { expected: p.dim(), found: q.dim() });
    }
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.0.iter().zip(&q.0).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(NumericsError::SupportViolation { index: i });
        }
        total += pi * (pi / qi).ln();
    }
    // rounding can leave a tiny negative residue when p ≈ q
    Ok(total.max(0.0))
}

/// KL between two feature vectors, each mapped through [`softmax`].
pub fn feature_kl(a: &[f64], b: &[f64]) -> Result<f64, NumericsError> {
    kl_divergence(&softmax(a), &softmax(b))
}
