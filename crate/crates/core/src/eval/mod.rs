//! Evaluation toolkit: metrics, the anchor-embedding split builder and the
//! multi-seed evaluation runner.

pub mod metrics;
pub mod run;
pub mod split;

pub use metrics::{
    hard_recall, normalize_name, recognition_metrics, round_to, vqa_accuracy, MetricError,
    RecognitionStats,
};
pub use run::{run_eval, DatasetManifest, EvalOptions, EvalReport, TaskKind};
pub use split::{build_split, ConceptSplit, SplitError, SplitSpec};
