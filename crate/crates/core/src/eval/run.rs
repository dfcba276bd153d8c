//! Multi-seed evaluation over a dataset manifest.
//!
//! Each seed shuffles the processing order and is forwarded to the chat
//! backend; results are folded back in query-id order, so deterministic
//! backends produce identical per-seed metrics. Per-query failures are
//! counted and written to the trace file instead of aborting the run.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::metrics::{hard_recall, recognition_metrics, vqa_accuracy};
use crate::db::Snapshot;
use crate::image::{ImageFile, ImagePayload};
use crate::inference::{
    InferenceTrace, Pipeline, PipelineConfig, RecognitionMode, Task,
};
use crate::protocol::option_letter;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid dataset manifest: {0}")]
    Manifest(String),
    #[error("the dataset has no queries for the selected task(s)")]
    NoQueries,
    #[error("at least one seed is required")]
    NoSeeds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Recognition,
    Caption,
    Vqa,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Recognition, TaskKind::Caption, TaskKind::Vqa];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Recognition => "recognition",
            TaskKind::Caption => "caption",
            TaskKind::Vqa => "vqa",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "recognition" | "recognize" => Ok(TaskKind::Recognition),
            "caption" => Ok(TaskKind::Caption),
            "vqa" => Ok(TaskKind::Vqa),
            other => Err(format!("unknown task {other:?} (expected recognition, caption or vqa)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Pos,
    Neg,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConcept {
    pub name: String,
    pub category: String,
    pub reference_image: String,
    #[serde(default)]
    pub query_images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecognitionItem {
    pub query_image: String,
    pub target_name: String,
    pub label: Label,
    /// Concept actually shown, for retrieval hit rates on negatives.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_name: Option<String>,
}

impl RecognitionItem {
    fn truth(&self) -> Option<&str> {
        match (&self.true_name, self.label) {
            (Some(n), _) => Some(n),
            (None, Label::Pos) => Some(&self.target_name),
            (None, Label::Neg) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionItem {
    pub query_image: String,
    pub concept_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaItem {
    pub query_image: String,
    pub question: String,
    pub choices: Vec<String>,
    /// Option letter or the text of the correct choice.
    pub gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_name: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetTasks {
    #[serde(default)]
    pub recognition: Vec<RecognitionItem>,
    #[serde(default)]
    pub caption: Vec<CaptionItem>,
    #[serde(default)]
    pub vqa: Vec<VqaItem>,
}

/// `dataset.json`: concepts to enroll plus the evaluation queries. Image
/// paths are relative to the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default)]
    pub concepts: Vec<DatasetConcept>,
    #[serde(default)]
    pub tasks: DatasetTasks,
}

impl DatasetManifest {
    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let manifest: Self =
            serde_json::from_str(text).map_err(|e| EvalError::Manifest(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::Manifest(m));
        for (i, c) in self.concepts.iter().enumerate() {
            if c.name.trim().is_empty() || c.category.trim().is_empty() {
                return bad(format!("concept {i} needs a name and a category"));
            }
        }
        for (i, v) in self.tasks.vqa.iter().enumerate() {
            if v.choices.is_empty() || v.choices.len() > 26 {
                return bad(format!("vqa item {i} needs between 1 and 26 choices"));
            }
        }
        Ok(())
    }

    pub fn query_count(&self, task: TaskKind) -> usize {
        match task {
            TaskKind::Recognition => self.tasks.recognition.len(),
            TaskKind::Caption => self.tasks.caption.len(),
            TaskKind::Vqa => self.tasks.vqa.len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub tasks: Vec<TaskKind>,
    pub seeds: Vec<u64>,
    /// Queries processed concurrently.
    pub jobs: usize,
    /// JSON-lines trace output, one line per query and seed.
    pub traces_out: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tasks: TaskKind::ALL.to_vec(),
            seeds: vec![0],
            jobs: 1,
            traces_out: None,
        }
    }
}

/// Mean and population standard deviation across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub per_seed: Vec<Option<f64>>,
}

impl MetricSummary {
    /// Summarizes the seeds where the metric is defined.
    pub fn from_values(per_seed: Vec<Option<f64>>) -> Self {
        let defined: Vec<f64> = per_seed.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Self {
                mean: None,
                std: None,
                per_seed,
            };
        }
        let n = defined.len() as f64;
        // Offsetting by the first value keeps identical inputs exact.
        let x0 = defined[0];
        let mean = x0 + defined.iter().map(|x| x - x0).sum::<f64>() / n;
        let var = defined.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean: Some(mean),
            std: Some(var.sqrt()),
            per_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub total: usize,
    pub per_seed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub queries: usize,
    pub errors: ErrorSummary,
    pub metrics: BTreeMap<String, MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub tasks: BTreeMap<TaskKind, TaskReport>,
    pub config: PipelineConfig,
}

/// One query of one task, identified by task name and manifest index.
#[derive(Debug, Clone)]
struct Query {
    id: String,
    task: TaskKind,
    index: usize,
    image: String,
}

#[derive(Debug, Clone)]
struct QueryOutcome {
    text: String,
    final_name: String,
    trace: InferenceTrace,
}

type QueryResult = Result<QueryOutcome, String>;

type SeedMetrics = BTreeMap<String, Vec<Option<f64>>>;

/// Order-preserving parallel map over at most `jobs` worker threads.
fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = Vec::new();
    slots.resize_with(items.len(), || None);
    let done: Vec<Vec<(usize, R)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|_| {
                s.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= items.len() {
                            break out;
                        }
                        out.push((i, f(&items[i])));
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("eval worker panicked"))
            .collect()
    });
    for (i, r) in done.into_iter().flatten() {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// The option letter a VQA reply picked, or its trimmed text.
pub fn vqa_prediction(reply: &str, choices: &[String]) -> String {
    let t = reply
        .trim()
        .trim_start_matches(|c: char| !c.is_alphanumeric());
    let mut chars = t.chars();
    if let Some(first) = chars.next() {
        let letter = first.to_ascii_uppercase();
        let rest_ok = chars.next().is_none_or(|c| !c.is_alphanumeric());
        if rest_ok && letter.is_ascii_uppercase() && ((letter as u8 - b'A') as usize) < choices.len() {
            return letter.to_string();
        }
    }
    let normalized = reply.trim().to_lowercase();
    choices
        .iter()
        .position(|c| c.trim().to_lowercase() == normalized)
        .map_or_else(|| reply.trim().to_string(), |i| option_letter(i).to_string())
}

fn gold_letter(gold: &str, choices: &[String]) -> String {
    let g = gold.trim();
    choices
        .iter()
        .position(|c| c.trim().eq_ignore_ascii_case(g))
        .map_or_else(|| g.to_string(), |i| option_letter(i).to_string())
}

struct Runner<'a> {
    manifest: &'a DatasetManifest,
    base_dir: &'a Path,
    snapshot: &'a Snapshot,
    jobs: usize,
}

impl Runner<'_> {
    fn queries(&self, task: TaskKind) -> Vec<Query> {
        let images: Vec<&str> = match task {
            TaskKind::Recognition => self.manifest.tasks.recognition.iter().map(|q| q.query_image.as_str()).collect(),
            TaskKind::Caption => self.manifest.tasks.caption.iter().map(|q| q.query_image.as_str()).collect(),
            TaskKind::Vqa => self.manifest.tasks.vqa.iter().map(|q| q.query_image.as_str()).collect(),
        };
        images
            .into_iter()
            .enumerate()
            .map(|(index, image)| Query {
                id: format!("{}-{index:04}", task.as_str()),
                task,
                index,
                image: image.to_string(),
            })
            .collect()
    }

    fn load_image(&self, path: &str) -> Result<ImagePayload, String> {
        ImageFile::read(self.base_dir.join(path))
            .map(|f| f.payload)
            .map_err(|e| e.to_string())
    }

    fn name_of(&self, concept_id: &str) -> String {
        self.snapshot
            .get(concept_id)
            .map_or_else(|| concept_id.to_string(), |r| r.name.clone())
    }

    /// Runs one seed of one task; results are in query-id order.
    fn run_task(&self, pipeline: &Pipeline, task: TaskKind, seed: u64) -> Vec<(Query, QueryResult)> {
        let queries = self.queries(task);
        let mut order: Vec<usize> = (0..queries.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

        // Recognition through the full pipeline resolves each distinct image
        // once and reuses it for every target asked about that image.
        let shared: HashMap<String, Result<InferenceTrace, String>> = if task
            == TaskKind::Recognition
            && pipeline.config().recognition_mode == RecognitionMode::PipelineMatch
        {
            let mut images: Vec<String> = Vec::new();
            for &i in &order {
                if !images.contains(&queries[i].image) {
                    images.push(queries[i].image.clone());
                }
            }
            let traces = parallel_map(&images, self.jobs, |img| {
                let payload = self.load_image(img)?;
                pipeline
                    .infer_concept(&payload, self.snapshot)
                    .map_err(|e| e.to_string())
            });
            images.into_iter().zip(traces).collect()
        } else {
            HashMap::new()
        };

        let shuffled: Vec<&Query> = order.iter().map(|&i| &queries[i]).collect();
        let results = parallel_map(&shuffled, self.jobs, |q| self.run_query(pipeline, q, &shared));
        let mut paired: Vec<(Query, QueryResult)> = shuffled
            .into_iter()
            .cloned()
            .zip(results)
            .collect();
        paired.sort_by_key(|(q, _)| q.index);
        paired
    }

    fn run_query(
        &self,
        pipeline: &Pipeline,
        q: &Query,
        shared: &HashMap<String, Result<InferenceTrace, String>>,
    ) -> QueryResult {
        let tasks = &self.manifest.tasks;
        if let (TaskKind::Recognition, Some(cached)) = (q.task, shared.get(&q.image)) {
            let item = &tasks.recognition[q.index];
            let target = self
                .snapshot
                .by_name(&item.target_name)
                .ok_or_else(|| format!("no enrolled concept is named {:?}", item.target_name))?;
            let trace = cached.clone()?;
            let yes = trace.final_concept == target.concept_id;
            return Ok(QueryOutcome {
                text: if yes { "yes" } else { "no" }.to_string(),
                final_name: self.name_of(&trace.final_concept),
                trace,
            });
        }
        let task = match q.task {
            TaskKind::Recognition => Task::Recognition {
                target: tasks.recognition[q.index].target_name.clone(),
            },
            TaskKind::Caption => Task::Caption,
            TaskKind::Vqa => Task::Vqa {
                question: tasks.vqa[q.index].question.clone(),
                choices: tasks.vqa[q.index].choices.clone(),
            },
        };
        let payload = self.load_image(&q.image)?;
        let answer = pipeline
            .answer_query(&payload, &task, self.snapshot)
            .map_err(|e| e.to_string())?;
        Ok(QueryOutcome {
            text: answer.text,
            final_name: answer.concept_name,
            trace: answer.trace,
        })
    }

    fn truth(&self, q: &Query) -> Option<String> {
        let t = &self.manifest.tasks;
        match q.task {
            TaskKind::Recognition => t.recognition[q.index].truth().map(str::to_string),
            TaskKind::Caption => Some(t.caption[q.index].concept_name.clone()),
            TaskKind::Vqa => t.vqa[q.index].concept_name.clone(),
        }
    }

    fn hit(&self, q: &Query, trace: &InferenceTrace) -> Option<bool> {
        let truth = self.truth(q)?;
        let id = self.snapshot.by_name(&truth)?.concept_id.clone();
        Some(trace.candidate_set.rank_of(&id).is_some())
    }

    fn seed_metrics(&self, task: TaskKind, results: &[(Query, QueryResult)]) -> BTreeMap<String, Option<f64>> {
        let t = &self.manifest.tasks;
        let ok: Vec<(&Query, &QueryOutcome)> = results
            .iter()
            .filter_map(|(q, r)| r.as_ref().ok().map(|o| (q, o)))
            .collect();
        let mut m = BTreeMap::new();
        match task {
            TaskKind::Recognition => {
                let pairs: Vec<(bool, bool)> = ok
                    .iter()
                    .map(|(q, o)| (t.recognition[q.index].label == Label::Pos, o.text == "yes"))
                    .collect();
                let stats = recognition_metrics(&pairs).ok();
                m.insert("pos_acc".into(), stats.and_then(|s| s.pos_acc));
                m.insert("neg_acc".into(), stats.and_then(|s| s.neg_acc));
                m.insert("wtd".into(), stats.and_then(|s| s.wtd));
            }
            TaskKind::Caption => {
                let pairs: Vec<(String, String)> = ok
                    .iter()
                    .map(|(q, o)| (o.text.clone(), t.caption[q.index].concept_name.clone()))
                    .collect();
                m.insert("hard_recall".into(), hard_recall(&pairs).ok());
            }
            TaskKind::Vqa => {
                let pairs: Vec<(String, String)> = ok
                    .iter()
                    .map(|(q, o)| {
                        let item = &t.vqa[q.index];
                        (vqa_prediction(&o.text, &item.choices), gold_letter(&item.gold, &item.choices))
                    })
                    .collect();
                m.insert("accuracy".into(), vqa_accuracy(&pairs).ok());
            }
        }
        let hits: Vec<bool> = ok.iter().filter_map(|(q, o)| self.hit(q, &o.trace)).collect();
        m.insert("hit_at_k".into(), crate::retrieval::hit_rate(&hits));
        let calls: Vec<f64> = ok.iter().map(|(_, o)| f64::from(o.trace.vlm_calls)).collect();
        m.insert(
            "mean_vlm_calls".into(),
            (!calls.is_empty()).then(|| calls.iter().sum::<f64>() / calls.len() as f64),
        );
        m
    }
}

fn trace_line(seed: u64, q: &Query, r: &QueryResult) -> serde_json::Value {
    let mut line = json!({
        "seed": seed,
        "query_id": q.id,
        "task": q.task,
        "query_image": q.image,
    });
    match r {
        Ok(o) => {
            line["answer"] = json!(o.text);
            line["concept"] = json!(o.final_name);
            line["trace"] = serde_json::to_value(&o.trace).expect("trace serializes");
        }
        Err(e) => line["error"] = json!(e),
    }
    line
}

/// Runs every selected task under every seed. `base_dir` resolves the
/// manifest's relative image paths.
pub fn run_eval(
    manifest: &DatasetManifest,
    base_dir: &Path,
    pipeline: &Pipeline,
    snapshot: &Snapshot,
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if options.seeds.is_empty() {
        return Err(EvalError::NoSeeds);
    }
    let mut tasks: Vec<TaskKind> = options
        .tasks
        .iter()
        .copied()
        .filter(|&t| manifest.query_count(t) > 0)
        .collect();
    tasks.sort();
    tasks.dedup();
    if tasks.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let runner = Runner {
        manifest,
        base_dir,
        snapshot,
        jobs: options.jobs.max(1),
    };
    let mut trace_file = match &options.traces_out {
        Some(path) => Some(std::io::BufWriter::new(fs::File::create(path).map_err(
            |source| EvalError::Io {
                path: path.clone(),
                source,
            },
        )?)),
        None => None,
    };

    // per task: error counts and metric values, one entry per seed
    let mut per_task: BTreeMap<TaskKind, (Vec<usize>, SeedMetrics)> = BTreeMap::new();
    for &seed in &options.seeds {
        let seeded = pipeline.with_seed(Some(seed));
        for &task in &tasks {
            let results = runner.run_task(&seeded, task, seed);
            let errors = results.iter().filter(|(_, r)| r.is_err()).count();
            for (q, r) in &results {
                if let Err(e) = r {
                    log::warn!("seed {seed}, {}: {e}", q.id);
                }
                if let Some(w) = trace_file.as_mut() {
                    let line = trace_line(seed, q, r);
                    writeln!(w, "{line}").map_err(|source| EvalError::Io {
                        path: options.traces_out.clone().unwrap_or_default(),
                        source,
                    })?;
                }
            }
            let entry = per_task.entry(task).or_default();
            entry.0.push(errors);
            for (name, value) in runner.seed_metrics(task, &results) {
                entry.1.entry(name).or_default().push(value);
            }
        }
    }
    if let Some(mut w) = trace_file {
        w.flush().map_err(|source| EvalError::Io {
            path: options.traces_out.clone().unwrap_or_default(),
            source,
        })?;
    }

    let tasks = per_task
        .into_iter()
        .map(|(task, (errors, metrics))| {
            let report = TaskReport {
                queries: manifest.query_count(task),
                errors: ErrorSummary {
                    total: errors.iter().sum(),
                    per_seed: errors,
                },
                metrics: metrics
                    .into_iter()
                    .map(|(k, v)| (k, MetricSummary::from_values(v)))
                    .collect(),
            };
            (task, report)
        })
        .collect();
    Ok(EvalReport {
        seeds: options.seeds.clone(),
        tasks,
        config: pipeline.config().clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_of_identical_values_is_exact() {
        let s = MetricSummary::from_values(vec![Some(0.1), Some(0.1), Some(0.1)]);
        assert_eq!(s.mean, Some(0.1));
        assert_eq!(s.std, Some(0.0));
    }

    #[test]
    fn summary_population_std() {
        let s = MetricSummary::from_values(vec![Some(1.0), Some(3.0), None]);
        assert_eq!(s.mean, Some(2.0));
        assert_eq!(s.std, Some(1.0));
        let none = MetricSummary::from_values(vec![None]);
        assert_eq!(none.mean, None);
    }

    #[test]
    fn vqa_letters_and_texts() {
        let choices = vec!["red".to_string(), "blue".to_string()];
        assert_eq!(vqa_prediction("B.", &choices), "B");
        assert_eq!(vqa_prediction("(a) red", &choices), "A");
        assert_eq!(vqa_prediction("Blue", &choices), "B");
        assert_eq!(vqa_prediction("Zebra", &choices), "Zebra");
        assert_eq!(gold_letter("blue", &choices), "B");
        assert_eq!(gold_letter("A", &choices), "A");
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u32> = (0..50).collect();
        assert_eq!(parallel_map(&items, 4, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn manifest_defaults() {
        let m = DatasetManifest::from_json(r#"{"tasks": {"caption": [{"query_image": "q.png", "concept_name": "mug"}]}}"#).unwrap();
        assert_eq!(m.query_count(TaskKind::Caption), 1);
        assert_eq!(m.query_count(TaskKind::Vqa), 0);
        assert!(DatasetManifest::from_json("{").is_err());
    }
}
