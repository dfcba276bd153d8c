//! Retrieval-augmented personalization of a multimodal chat model.
//!
//! Concepts are enrolled from a single reference image into a
//! [`db::Database`]; queries are answered by retrieving candidates with
//! fused image/text similarity, letting the chat model reason over their
//! fingerprint attributes, verifying its choice, and falling back to
//! pairwise image comparison when the check fails.

pub mod db;
pub mod embedding;
pub mod gateway;
pub mod image;
pub mod protocol;
pub mod enrollment;
pub mod inference;
pub mod retrieval;
pub mod eval;
