//! Unit-norm embedding vectors and exact cosine top-k ranking.
//!
//! Both the motivation index in the record store and the cognition base rank
//! by cosine similarity over unit vectors, so cosine reduces to a dot product.
//! Ranking is exact (full scan); ties resolve toward the smaller id.

use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Allowed deviation of a stored vector's L2 norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("cannot normalise a zero or non-finite vector")]
    Degenerate,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("vector norm {0} is not within {NORM_TOLERANCE} of 1")]
    NotUnit(f64),
}

/// An immutable, L2-normalised embedding. Cloning shares the buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UnitVector(Arc<[f64]>);

impl UnitVector {
    /// Normalise an arbitrary non-zero vector.
    pub fn normalize(raw: Vec<f64>) -> Result<Self, EmbeddingError> {
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(EmbeddingError::Degenerate);
        }
        Ok(Self(raw.into_iter().map(|x| x / norm).collect()))
    }

    /// Accept a vector that is already unit-norm (within tolerance).
    pub fn from_unit(raw: Vec<f64>) -> Result<Self, EmbeddingError> {
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(EmbeddingError::NotUnit(norm));
        }
        Ok(Self(raw.into()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Cosine similarity; both operands are unit vectors so this is the dot product.
    pub fn cosine(&self, other: &UnitVector) -> Result<f64, EmbeddingError> {
        if self.dim() != other.dim() {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(dot(&self.0, &other.0))
    }
}

impl TryFrom<Vec<f64>> for UnitVector {
    type Error = EmbeddingError;

    fn try_from(raw: Vec<f64>) -> Result<Self, Self::Error> {
        Self::from_unit(raw)
    }
}

impl From<UnitVector> for Vec<f64> {
    fn from(v: UnitVector) -> Self {
        v.0.to_vec()
    }
}

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error(transparent)]
    Vector(#[from] EmbeddingError),
}

/// Anything that maps text to a fixed-dimension unit vector.
pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<UnitVector, EmbedError>;
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A scored hit: `(id, cosine similarity)`.
pub type Hit<Id> = (Id, f64);

fn hit_order<Id: Ord>(a: &Hit<Id>, b: &Hit<Id>) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

/// Exact top-k over `(id, vector)` pairs: descending similarity, ties by smaller id.
///
/// Vectors whose dimension differs from the query are an error, never skipped.
pub fn top_k<'a, Id, I>(
    query: &UnitVector,
    candidates: I,
    k: usize,
) -> Result<Vec<Hit<Id>>, EmbeddingError>
where
    Id: Ord + Copy + 'a,
    I: IntoIterator<Item = (Id, &'a UnitVector)>,
{
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut hits = candidates
        .into_iter()
        .map(|(id, v)| query.cosine(v).map(|s| (id, s)))
        .collect::<Result<Vec<_>, _>>()?;
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, hit_order);
        hits.truncate(k);
    }
    hits.sort_by(hit_order);
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> UnitVector {
        UnitVector::normalize(v.to_vec()).unwrap()
    }

    #[test]
    fn normalize_rejects_zero() {
        assert_eq!(
            UnitVector::normalize(vec![0.0; 4]),
            Err(EmbeddingError::Degenerate)
        );
    }

    #[test]
    fn serde_rejects_non_unit() {
        let err = serde_json::from_str::<UnitVector>("[1.0, 1.0]");
        assert!(err.is_err());
        let ok: UnitVector = serde_json::from_str("[0.6, 0.8]").unwrap();
        assert!((ok.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_is_zero() {
        let a = unit(&[1.0, 0.0]);
        let b = unit(&[0.0, 3.0]);
        assert_eq!(a.cosine(&b).unwrap(), 0.0);
    }

    #[test]
    fn top_k_ties_break_by_id_and_truncate() {
        let q = unit(&[1.0, 0.0]);
        let same = unit(&[1.0, 0.0]);
        let side = unit(&[0.0, 1.0]);
        let items = vec![(9u64, &same), (4u64, &same), (2u64, &side)];
        let hits = top_k(&q, items.clone(), 2).unwrap();
        assert_eq!(hits.iter().map(|h| h.0).collect::<Vec<_>>(), vec![4, 9]);
        let hits = top_k(&q, items, 5).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[2].0, 2);
    }

    #[test]
    fn mixed_dimension_is_error() {
        let q = unit(&[1.0, 0.0]);
        let other = unit(&[1.0, 0.0, 0.0]);
        assert!(top_k(&q, vec![(1u64, &other)], 1).is_err());
    }
}
