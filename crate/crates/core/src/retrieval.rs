//! Exact top-K concept retrieval over a database snapshot.
//!
//! Every record is scored against the query image embedding twice: against
//! its reference image embedding (`s_vv`) and against its description
//! embedding (`s_vt`). The active [`RetrievalMode`] decides which score
//! ranks; ties break by ascending concept id so results are reproducible.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::db::Snapshot;
use crate::embedding::{Embedding, EmbeddingError};

pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error("the concept database is empty")]
    EmptyDatabase,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("two-step rerank pool {pool} is smaller than k = {k}")]
    PoolTooSmall { pool: usize, k: usize },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RetrievalMode {
    #[default]
    Fused,
    ImageOnly,
    TextOnly,
    /// Take the `rerank_pool` best by image similarity, then re-rank those
    /// by image-to-text similarity.
    TwoStep { rerank_pool: usize },
}

impl RetrievalMode {
    pub fn validate(&self, k: usize) -> Result<(), RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        match *self {
            RetrievalMode::TwoStep { rerank_pool } if rerank_pool < k => {
                Err(RetrievalError::PoolTooSmall { pool: rerank_pool, k })
            }
            _ => Ok(()),
        }
    }

    /// The score this mode ranks by.
    pub fn score(&self, entry: &CandidateEntry) -> f64 {
        match self {
            RetrievalMode::Fused => entry.fused,
            RetrievalMode::ImageOnly => entry.s_vv,
            RetrievalMode::TextOnly | RetrievalMode::TwoStep { .. } => entry.s_vt,
        }
    }
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RetrievalMode::Fused => f.write_str("fused"),
            RetrievalMode::ImageOnly => f.write_str("image_only"),
            RetrievalMode::TextOnly => f.write_str("text_only"),
            RetrievalMode::TwoStep { rerank_pool } => write!(f, "two_step:{rerank_pool}"),
        }
    }
}

impl From<RetrievalMode> for String {
    fn from(mode: RetrievalMode) -> Self {
        mode.to_string()
    }
}

impl TryFrom<String> for RetrievalMode {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl FromStr for RetrievalMode {
    type Err = String;

    /// Accepts `fused`, `image_only`, `text_only` and `two_step:<pool>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        match s.as_str() {
            "fused" => Ok(RetrievalMode::Fused),
            "image_only" | "image" => Ok(RetrievalMode::ImageOnly),
            "text_only" | "text" => Ok(RetrievalMode::TextOnly),
            other => {
                let pool = other
                    .strip_prefix("two_step:")
                    .and_then(|p| p.parse::<usize>().ok())
                    .filter(|&p| p > 0)
                    .ok_or_else(|| {
                        format!(
                            "unknown retrieval mode {other:?} \
                             (expected fused, image_only, text_only or two_step:<pool>)"
                        )
                    })?;
                Ok(RetrievalMode::TwoStep { rerank_pool: pool })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub concept_id: String,
    pub s_vv: f64,
    pub s_vt: f64,
    pub fused: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub entries: Vec<CandidateEntry>,
    pub k: usize,
    pub mode: RetrievalMode,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> + '_ {
        self.entries.iter().map(|e| e.concept_id.as_str())
    }

    /// Zero-based rank of a concept, if retrieved.
    pub fn rank_of(&self, concept_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.concept_id == concept_id)
    }

    pub fn top(&self) -> Option<&CandidateEntry> {
        self.entries.first()
    }
}

/// Cosine similarity of unit-norm embeddings, clamped to `[-1, 1]`.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbeddingError> {
    a.dot(b)
}

/// Average of the image-image and image-text similarities.
pub fn fuse(s_vv: f64, s_vt: f64) -> f64 {
    (s_vv + s_vt) / 2.0
}

/// Descending by `score`, then ascending concept id.
fn rank_order(score: impl Fn(&CandidateEntry) -> f64) -> impl Fn(&CandidateEntry, &CandidateEntry) -> Ordering {
    move |a, b| {
        score(b)
            .total_cmp(&score(a))
            .then_with(|| a.concept_id.cmp(&b.concept_id))
    }
}

/// Scores every record against the query, in concept-id order.
pub fn score_all(query: &Embedding, snapshot: &Snapshot) -> Result<Vec<CandidateEntry>, RetrievalError> {
    snapshot
        .records()
        .map(|r| {
            let s_vv = cosine(query, &r.visual_embedding)?;
            let s_vt = cosine(query, &r.textual_embedding)?;
            Ok(CandidateEntry {
                concept_id: r.concept_id.clone(),
                s_vv,
                s_vt,
                fused: fuse(s_vv, s_vt),
            })
        })
        .collect()
}

pub fn retrieve(
    query: &Embedding,
    snapshot: &Snapshot,
    k: usize,
    mode: RetrievalMode,
) -> Result<CandidateSet, RetrievalError> {
    mode.validate(k)?;
    if snapshot.is_empty() {
        return Err(RetrievalError::EmptyDatabase);
    }
    let mut entries = score_all(query, snapshot)?;
    match mode {
        RetrievalMode::TwoStep { rerank_pool } => {
            entries.sort_by(rank_order(|e| e.s_vv));
            entries.truncate(rerank_pool);
            entries.sort_by(rank_order(|e| e.s_vt));
        }
        _ => entries.sort_by(rank_order(|e| mode.score(e))),
    }
    entries.truncate(k);
    Ok(CandidateSet { entries, k, mode })
}

pub fn hit_at_k(candidates: &CandidateSet, true_concept_id: &str) -> bool {
    candidates.rank_of(true_concept_id).is_some()
}

/// Fraction of hits; `None` for an empty list.
pub fn hit_rate(hits: &[bool]) -> Option<f64> {
    if hits.is_empty() {
        return None;
    }
    Some(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}
