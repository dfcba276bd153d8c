//! Unit-norm embedding vectors and cosine similarity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum allowed deviation of a stored embedding's L2 norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbeddingError {
    #[error("embedding is empty")]
    Empty,
    #[error("embedding contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("embedding has zero norm and cannot be normalized")]
    ZeroNorm,
    #[error("embedding norm {0} is not 1")]
    NotUnitNorm(f64),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

/// A fixed-dimension vector with unit L2 norm.
///
/// Normalization happens at construction, so the dot product of two
/// embeddings is their cosine similarity.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Builds an embedding from raw values, scaling them to unit norm.
    pub fn normalize(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        check_finite(&values)?;
        let norm = l2_norm(&values);
        if norm == 0.0 {
            return Err(EmbeddingError::ZeroNorm);
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Accepts values that are already unit norm, without rescaling them.
    ///
    /// Used when reading stored vectors, where any drift means corruption.
    pub fn from_unit(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        check_finite(&values)?;
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(EmbeddingError::NotUnitNorm(norm));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    /// Dot product, which is the cosine similarity for unit vectors.
    /// The result is clamped to `[-1, 1]` to absorb rounding.
    pub fn dot(&self, other: &Embedding) -> Result<f64, EmbeddingError> {
        if self.dim() != other.dim() {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        let d: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        Ok(d.clamp(-1.0, 1.0))
    }
}

impl<'de> Deserialize<'de> for Embedding {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(deserializer)?;
        Embedding::from_unit(values).map_err(serde::de::Error::custom)
    }
}

fn check_finite(values: &[f64]) -> Result<(), EmbeddingError> {
    if values.is_empty() {
        return Err(EmbeddingError::Empty);
    }
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(EmbeddingError::NonFinite(i)),
        None => Ok(()),
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity between two arbitrary (not necessarily normalized)
/// vectors, in `[-1, 1]`.
pub fn cosine_raw(a: &[f64], b: &[f64]) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
