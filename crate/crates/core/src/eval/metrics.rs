//! Recognition, captioning and VQA metrics. Undefined ratios are reported
//! as `None`, never as zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("no results to score")]
    Empty,
    #[error("no positive samples; positive accuracy is undefined")]
    NoPositives,
    #[error("no negative samples; negative accuracy is undefined")]
    NoNegatives,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecognitionStats {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
    /// Recall on positive samples.
    pub pos_acc: Option<f64>,
    /// Specificity on negative samples.
    pub neg_acc: Option<f64>,
    /// Unweighted mean of the two.
    pub wtd: Option<f64>,
}

impl RecognitionStats {
    pub fn from_counts(tp: u64, fn_: u64, tn: u64, fp: u64) -> Self {
        let ratio = |a: u64, b: u64| (a + b > 0).then(|| a as f64 / (a + b) as f64);
        let pos_acc = ratio(tp, fn_);
        let neg_acc = ratio(tn, fp);
        let wtd = match (pos_acc, neg_acc) {
            (Some(p), Some(n)) => Some((p + n) / 2.0),
            _ => None,
        };
        Self {
            tp,
            fn_,
            tn,
            fp,
            pos_acc,
            neg_acc,
            wtd,
        }
    }

    /// The weighted accuracy, or why it is undefined.
    pub fn weighted(&self) -> Result<f64, MetricError> {
        match (self.pos_acc, self.neg_acc) {
            (Some(p), Some(n)) => Ok((p + n) / 2.0),
            (None, _) => Err(MetricError::NoPositives),
            (_, None) => Err(MetricError::NoNegatives),
        }
    }
}

/// Scores `(is_positive_sample, answered_yes)` pairs.
pub fn recognition_metrics(results: &[(bool, bool)]) -> Result<RecognitionStats, MetricError> {
    if results.is_empty() {
        return Err(MetricError::Empty);
    }
    let (mut tp, mut fn_, mut tn, mut fp) = (0, 0, 0, 0);
    for &(positive, yes) in results {
        match (positive, yes) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    Ok(RecognitionStats::from_counts(tp, fn_, tn, fp))
}

/// Case-folded text with `_` and `-` read as spaces and whitespace collapsed.
pub fn normalize_name(s: &str) -> String {
    s.to_lowercase()
        .replace(['_', '-'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Fraction of `(caption, true_name)` pairs whose caption mentions the name.
pub fn hard_recall(captions: &[(String, String)]) -> Result<f64, MetricError> {
    if captions.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = captions
        .iter()
        .filter(|(caption, name)| {
            let name = normalize_name(name);
            !name.is_empty() && normalize_name(caption).contains(&name)
        })
        .count();
    Ok(hits as f64 / captions.len() as f64)
}

fn normalize_choice(s: &str) -> String {
    s.trim()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .trim()
        .to_lowercase()
}

/// Exact-match accuracy over `(predicted, gold)` pairs after trimming,
/// case-folding and dropping punctuation.
pub fn vqa_accuracy(results: &[(String, String)]) -> Result<f64, MetricError> {
    if results.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = results
        .iter()
        .filter(|(p, g)| normalize_choice(p) == normalize_choice(g))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Rounds half away from zero at `decimals`, after snapping away binary
/// noise (so 93.75 written as 0.966/0.909 averages still rounds up).
pub fn round_to(x: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let scaled = ((x * scale) * 1e6).round() / 1e6;
    scaled.round() / scale
}
