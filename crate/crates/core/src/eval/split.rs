//! Per-concept reference/query split: the image nearest the mean embedding
//! becomes the enrollment reference, the others become queries ordered
//! furthest-first.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{Embedding, EmbeddingError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplitError {
    #[error("concept {concept:?} has {count} image(s); at least 2 are needed")]
    TooFewImages { concept: String, count: usize },
    #[error("concept {concept:?} lists image {image:?} twice")]
    DuplicateImage { concept: String, image: String },
    #[error("concept {concept:?}: {source}")]
    Embedding {
        concept: String,
        source: EmbeddingError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSplit {
    pub reference: String,
    /// Furthest from the anchor first.
    pub queries: Vec<String>,
}

/// Concept name to its split, in name order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SplitSpec {
    pub concepts: BTreeMap<String, ConceptSplit>,
}

/// Unit-normalized mean, or `None` when the mean is the zero vector.
fn anchor(embeddings: &[&Embedding]) -> Option<Embedding> {
    let dim = embeddings[0].dim();
    let mut sum = vec![0.0; dim];
    for e in embeddings {
        for (s, v) in sum.iter_mut().zip(e.values()) {
            *s += v;
        }
    }
    let n = embeddings.len() as f64;
    Embedding::normalize(sum.into_iter().map(|s| s / n).collect()).ok()
}

fn split_one(
    concept: &str,
    images: &[(String, Embedding)],
    n_query: Option<usize>,
) -> Result<ConceptSplit, SplitError> {
    if images.len() < 2 {
        return Err(SplitError::TooFewImages {
            concept: concept.to_string(),
            count: images.len(),
        });
    }
    let mut seen = std::collections::BTreeSet::new();
    for (id, e) in images {
        if !seen.insert(id.as_str()) {
            return Err(SplitError::DuplicateImage {
                concept: concept.to_string(),
                image: id.clone(),
            });
        }
        if e.dim() != images[0].1.dim() {
            return Err(SplitError::Embedding {
                concept: concept.to_string(),
                source: EmbeddingError::DimensionMismatch {
                    expected: images[0].1.dim(),
                    actual: e.dim(),
                },
            });
        }
    }
    let embeddings: Vec<&Embedding> = images.iter().map(|(_, e)| e).collect();
    let anchor = anchor(&embeddings);
    let mut scored: Vec<(&str, f64)> = images
        .iter()
        .map(|(id, e)| {
            let cos = match &anchor {
                Some(a) => a.dot(e).expect("dimensions checked above"),
                None => 0.0,
            };
            (id.as_str(), cos)
        })
        .collect();
    // Nearest first; equal similarity falls back to the lower image id.
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let reference = scored[0].0.to_string();
    let mut rest: Vec<(&str, f64)> = scored[1..].to_vec();
    rest.sort_by(|a, b| match a.1.total_cmp(&b.1) {
        Ordering::Equal => a.0.cmp(b.0),
        other => other,
    });
    let mut queries: Vec<String> = rest.into_iter().map(|(id, _)| id.to_string()).collect();
    if let Some(n) = n_query {
        queries.truncate(n);
    }
    Ok(ConceptSplit { reference, queries })
}

/// Splits every concept's images. `n_query = None` keeps all remaining
/// images as queries.
pub fn build_split(
    images_per_concept: &BTreeMap<String, Vec<(String, Embedding)>>,
    n_query: Option<usize>,
) -> Result<SplitSpec, SplitError> {
    let concepts = images_per_concept
        .iter()
        .map(|(concept, images)| Ok((concept.clone(), split_one(concept, images, n_query)?)))
        .collect::<Result<_, SplitError>>()?;
    Ok(SplitSpec { concepts })
}
