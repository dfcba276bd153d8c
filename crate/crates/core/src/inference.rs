//! Query-time pipeline: retrieve candidates, let the chat model pick one
//! while listing the attributes it sees, check that pick against the
//! encoder, and fall back to one-by-one image comparison when the check
//! fails. The resolved concept then drives recognition, captioning or VQA.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::db::{ConceptRecord, Snapshot};
use crate::embedding::Embedding;
use crate::gateway::vlm::{word_logprob, YesNo};
use crate::gateway::{yes_no_probability, ChatRequest, Encoder, GatewayError, Vlm, YesNoMode};
use crate::image::{ImageError, ImagePayload, ImageStore};
use crate::protocol::{
    self, CotAnswer, CotPromptOptions, CotVerdict, RenderError, Uncertainty,
};
use crate::retrieval::{self, CandidateEntry, CandidateSet, RetrievalError, RetrievalMode, DEFAULT_K};

pub const COT_MAX_TOKENS: u32 = 512;
pub const PAIRWISE_MAX_TOKENS: u32 = 256;
pub const ANSWER_MAX_TOKENS: u32 = 256;

/// Placeholder replaced by each attribute before it is embedded.
pub const ATTRIBUTE_PLACEHOLDER: &str = "{attribute}";

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("no enrolled concept is named {0:?}")]
    UnknownTargetConcept(String),
    #[error("candidate {0} is missing from the database snapshot")]
    MissingCandidate(String),
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("could not render prompt: {0}")]
    Render(#[from] RenderError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Parses a snake_case enum name the same way the config file does.
fn parse_snake<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T, String> {
    let name = s.trim().to_ascii_lowercase().replace('-', "_");
    serde_json::from_value(serde_json::Value::String(name))
        .map_err(|_| format!("unknown {what} {s:?}"))
}

/// How the reasoning step's pick is checked before it is accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verification {
    /// Compare the pick with the best attribute-to-image similarity.
    #[default]
    Attribute,
    /// Offer an "I am not sure" answer; choosing it fails verification.
    Abstention,
    /// Add an "I don't know" option and compare answer-token log-probs.
    LogitsBased,
    /// Always run pairwise comparison.
    PairwiseAlways,
    /// Accept the pick as-is.
    None,
}

impl FromStr for Verification {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_snake(s, "verification strategy")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecognitionMode {
    /// Run the full pipeline and compare the resolved name with the target.
    #[default]
    PipelineMatch,
    /// Compare the query directly with the named target's reference image.
    DirectPairwise,
}

impl FromStr for RecognitionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_snake(s, "recognition mode")
    }
}

/// Named component combinations used in ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Full,
    RetrievalOnly,
    CotOnly,
    PairwiseOnly,
    NoFingerprints,
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_snake(s, "preset")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub k: usize,
    pub retrieval_mode: RetrievalMode,
    pub enable_cot: bool,
    pub enable_fingerprints: bool,
    pub enable_pairwise: bool,
    pub verification: Verification,
    pub pairwise_threshold: f64,
    pub recognition_mode: RecognitionMode,
    /// Use the raw yes/no ratio instead of the two-way softmax.
    pub logit_ratio_literal: bool,
    /// Text template wrapped around each attribute before embedding; must
    /// contain [`ATTRIBUTE_PLACEHOLDER`].
    pub attribute_template: String,
    /// Logits-based verification fails when
    /// `logprob(idk) + margin >= logprob(chosen)`.
    pub logits_margin: f64,
    /// Issue a query's pairwise comparisons concurrently.
    pub parallel_pairwise: bool,
    /// Forwarded to the chat backend with every request.
    pub seed: Option<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            retrieval_mode: RetrievalMode::Fused,
            enable_cot: true,
            enable_fingerprints: true,
            enable_pairwise: true,
            verification: Verification::Attribute,
            pairwise_threshold: 0.5,
            recognition_mode: RecognitionMode::PipelineMatch,
            logit_ratio_literal: false,
            attribute_template: ATTRIBUTE_PLACEHOLDER.to_string(),
            logits_margin: 0.0,
            parallel_pairwise: true,
            seed: None,
        }
    }
}

impl PipelineConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = Self::default();
        match preset {
            Preset::Full => base,
            Preset::RetrievalOnly => Self {
                enable_cot: false,
                enable_pairwise: false,
                verification: Verification::None,
                ..base
            },
            Preset::CotOnly => Self {
                enable_pairwise: false,
                verification: Verification::None,
                ..base
            },
            Preset::PairwiseOnly => Self {
                enable_cot: false,
                verification: Verification::PairwiseAlways,
                ..base
            },
            Preset::NoFingerprints => Self {
                enable_fingerprints: false,
                verification: Verification::PairwiseAlways,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        let bad = |m: String| Err(InferenceError::Config(m));
        self.retrieval_mode
            .validate(self.k)
            .map_err(|e| InferenceError::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.pairwise_threshold) {
            return bad(format!(
                "pairwise_threshold {} is outside [0, 1]",
                self.pairwise_threshold
            ));
        }
        if self.verification == Verification::PairwiseAlways && !self.enable_pairwise {
            return bad("verification = pairwise_always requires enable_pairwise".into());
        }
        if !self.enable_fingerprints
            && !matches!(
                self.verification,
                Verification::None | Verification::PairwiseAlways
            )
        {
            return bad(format!(
                "verification = {:?} needs fingerprint attributes; use none or pairwise_always",
                self.verification
            ));
        }
        if !self.attribute_template.contains(ATTRIBUTE_PLACEHOLDER) {
            return bad(format!(
                "attribute_template must contain {ATTRIBUTE_PLACEHOLDER}"
            ));
        }
        if !self.logits_margin.is_finite() {
            return bad("logits_margin must be finite".into());
        }
        Ok(())
    }

    fn yes_no_mode(&self) -> YesNoMode {
        if self.logit_ratio_literal {
            YesNoMode::LiteralRatio
        } else {
            YesNoMode::Softmax
        }
    }

    fn uncertainty(&self) -> Uncertainty {
        match self.verification {
            Verification::Abstention => Uncertainty::Abstain,
            Verification::LogitsBased => Uncertainty::IdkOption,
            _ => Uncertainty::None,
        }
    }
}

/// Conditions worth surfacing that did not stop the pipeline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceFlags {
    /// The reasoning reply was unusable; rank 1 stood in for the pick.
    pub cot_fallback: bool,
    /// The model abstained or chose the "I don't know" option.
    pub uncertain: bool,
    /// Every pairwise comparison answered no.
    pub pairwise_all_no: bool,
    /// Candidates whose pairwise reply could not be read (scored 0).
    pub pairwise_unparseable: Vec<String>,
}

impl TraceFlags {
    fn is_empty(&self) -> bool {
        *self == TraceFlags::default()
    }
}

/// Everything one query went through, serializable as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub candidate_set: CandidateSet,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cot_verdict: Option<CotVerdict>,
    /// The reasoning step's pick (rank 1 when reasoning is disabled).
    pub c_tilde: String,
    /// Mean attribute similarity per candidate; `null` marks a candidate
    /// without matched attributes, which can never win.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attribute_scores: Option<BTreeMap<String, Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_tilde_a: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verification_passed: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairwise_probs: Option<BTreeMap<String, f64>>,
    #[serde(rename = "final")]
    pub final_concept: String,
    pub vlm_calls: u32,
    #[serde(default, skip_serializing_if = "TraceFlags::is_empty")]
    pub flags: TraceFlags,
}

/// Reasoning result with option letters resolved to concept ids.
#[derive(Debug, Clone, PartialEq)]
pub struct CotSelection {
    /// `None` when the reply was unusable and rank 1 stands in.
    pub verdict: Option<CotVerdict>,
    pub c_tilde: String,
    /// Matched attributes per candidate, in rank order.
    pub matched: Vec<(String, Vec<String>)>,
    /// Model declined to commit to a candidate.
    pub uncertain: bool,
    /// Logits-based check says "I don't know" is at least as likely.
    pub idk_triggered: bool,
    pub vlm_calls: u32,
}

fn candidate_records<'s>(
    candidates: &CandidateSet,
    snapshot: &'s Snapshot,
) -> Result<Vec<&'s ConceptRecord>, InferenceError> {
    candidates
        .ids()
        .map(|id| {
            snapshot
                .get(id)
                .ok_or_else(|| InferenceError::MissingCandidate(id.to_string()))
        })
        .collect()
}

fn rank_one(candidates: &CandidateSet) -> Result<String, InferenceError> {
    candidates
        .top()
        .map(|e| e.concept_id.clone())
        .ok_or(InferenceError::Retrieval(RetrievalError::EmptyDatabase))
}

/// Whether the "I don't know" letter is within `margin` of the chosen one.
fn idk_within_margin(
    logprobs: &BTreeMap<String, f64>,
    chosen: char,
    idk: char,
    margin: f64,
) -> bool {
    let floor = logprobs.values().copied().fold(f64::INFINITY, f64::min);
    let lp = |c: char| word_logprob(logprobs, &c.to_ascii_lowercase().to_string()).unwrap_or(floor);
    lp(idk) + margin >= lp(chosen)
}

/// One reasoning call over the candidates (two if the reply is re-asked).
pub fn cot_select(
    query: &ImagePayload,
    candidates: &CandidateSet,
    snapshot: &Snapshot,
    vlm: &dyn Vlm,
    config: &PipelineConfig,
) -> Result<CotSelection, InferenceError> {
    let records = candidate_records(candidates, snapshot)?;
    let uncertainty = config.uncertainty();
    let prompt = protocol::render_cot_prompt_with(
        &records,
        &CotPromptOptions {
            include_attributes: config.enable_fingerprints,
            uncertainty,
        },
    )?;
    let request = ChatRequest::new(prompt.text.clone())
        .image(query.clone())
        .logprobs(uncertainty == Uncertainty::IdkOption)
        .max_tokens(COT_MAX_TOKENS)
        .seed(config.seed);
    let options = prompt.parse_options(uncertainty);
    let asked = protocol::ask_with_reask(vlm, &request, |raw| protocol::parse_cot(raw, &options))?;
    let verdict = match asked.value {
        Ok(v) => v,
        Err(e) => {
            log::warn!("reasoning reply unusable, falling back to retrieval rank 1: {e}");
            return Ok(CotSelection {
                verdict: None,
                c_tilde: rank_one(candidates)?,
                matched: candidates.ids().map(|id| (id.to_string(), Vec::new())).collect(),
                uncertain: false,
                idk_triggered: false,
                vlm_calls: asked.calls,
            });
        }
    };
    let matched = prompt
        .letter_map
        .iter()
        .map(|(letter, id)| {
            let attrs = verdict.matched_attributes.get(letter).cloned().unwrap_or_default();
            (id.clone(), attrs)
        })
        .collect();
    let (c_tilde, uncertain, idk_triggered) = match verdict.answer {
        CotAnswer::Letter(l) => {
            let idk = match (prompt.idk_letter, asked.answer_logprobs.as_ref()) {
                (Some(idk), Some(lps)) => idk_within_margin(lps, l, idk, config.logits_margin),
                _ => false,
            };
            (prompt.letter_map[&l].clone(), false, idk)
        }
        CotAnswer::Unsure => (rank_one(candidates)?, true, false),
    };
    Ok(CotSelection {
        verdict: Some(verdict),
        c_tilde,
        matched,
        uncertain,
        idk_triggered,
        vlm_calls: asked.calls,
    })
}

/// Attribute scores per candidate and their argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeCheck {
    /// In rank order; `None` for candidates without matched attributes.
    pub scores: Vec<(String, Option<f64>)>,
    pub c_tilde_a: Option<String>,
}

/// First index holding the maximum; earlier entries (better retrieval
/// rank) win ties.
fn argmax_by_rank(scores: impl IntoIterator<Item = Option<f64>>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.into_iter().enumerate() {
        if let Some(s) = s {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Scores each candidate by the mean similarity between the query image and
/// its matched attributes, and picks the best-scoring one.
pub fn attribute_verify(
    query_embedding: &Embedding,
    matched: &[(String, Vec<String>)],
    encoder: &dyn Encoder,
    template: &str,
) -> Result<AttributeCheck, InferenceError> {
    let unique: BTreeSet<&str> = matched
        .iter()
        .flat_map(|(_, attrs)| attrs.iter().map(String::as_str))
        .collect();
    let texts: Vec<String> = unique
        .iter()
        .map(|a| template.replace(ATTRIBUTE_PLACEHOLDER, a))
        .collect();
    let embeddings = if texts.is_empty() {
        Vec::new()
    } else {
        encoder.encode_text_batch(&texts)?
    };
    let mut similarity = BTreeMap::new();
    for (attr, emb) in unique.iter().zip(&embeddings) {
        similarity.insert(*attr, retrieval::cosine(query_embedding, emb).map_err(GatewayError::from)?);
    }
    let scores: Vec<(String, Option<f64>)> = matched
        .iter()
        .map(|(id, attrs)| {
            let score = (!attrs.is_empty()).then(|| {
                attrs.iter().map(|a| similarity[a.as_str()]).sum::<f64>() / attrs.len() as f64
            });
            (id.clone(), score)
        })
        .collect();
    let c_tilde_a = argmax_by_rank(scores.iter().map(|(_, s)| *s)).map(|i| scores[i].0.clone());
    Ok(AttributeCheck { scores, c_tilde_a })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseResult {
    /// `p(yes)` per candidate, in rank order.
    pub probs: Vec<(String, f64)>,
    pub best: String,
    pub all_no: bool,
    pub unparseable: Vec<String>,
    pub vlm_calls: u32,
}

fn pairwise_one(
    query: &ImagePayload,
    record: &ConceptRecord,
    vlm: &dyn Vlm,
    images: &dyn ImageStore,
    config: &PipelineConfig,
) -> Result<Option<(f64, YesNo)>, InferenceError> {
    let reference = images.load(&record.reference_image)?;
    let prompt = protocol::render_pairwise_prompt_with(record, config.enable_fingerprints)?;
    let request = ChatRequest::new(prompt)
        .image(query.clone())
        .image(reference)
        .logprobs(true)
        .max_tokens(PAIRWISE_MAX_TOKENS)
        .seed(config.seed);
    match yes_no_probability(vlm, &request, config.yes_no_mode()) {
        Ok(outcome) => Ok(Some((outcome.p, outcome.answer))),
        Err(GatewayError::AnswerUnparseable(text)) => {
            log::warn!("pairwise reply for {:?} unreadable: {text:?}", record.name);
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

/// Compares the query with each candidate's reference image (query first)
/// and picks the highest `p(yes)`; ties go to the better retrieval rank.
pub fn pairwise_refine(
    query: &ImagePayload,
    candidates: &CandidateSet,
    snapshot: &Snapshot,
    vlm: &dyn Vlm,
    images: &dyn ImageStore,
    config: &PipelineConfig,
) -> Result<PairwiseResult, InferenceError> {
    let records = candidate_records(candidates, snapshot)?;
    let outcomes: Vec<Result<Option<(f64, YesNo)>, InferenceError>> =
        if config.parallel_pairwise && records.len() > 1 {
            std::thread::scope(|s| {
                let handles: Vec<_> = records
                    .iter()
                    .map(|r| s.spawn(move || pairwise_one(query, r, vlm, images, config)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("pairwise worker panicked"))
                    .collect()
            })
        } else {
            records
                .iter()
                .map(|r| pairwise_one(query, r, vlm, images, config))
                .collect()
        };
    let mut probs = Vec::with_capacity(records.len());
    let mut unparseable = Vec::new();
    let mut all_no = true;
    for (record, outcome) in records.iter().zip(outcomes) {
        let p = match outcome? {
            Some((p, answer)) => {
                all_no &= answer == YesNo::No;
                p
            }
            None => {
                unparseable.push(record.concept_id.clone());
                0.0
            }
        };
        probs.push((record.concept_id.clone(), p));
    }
    let best_index = argmax_by_rank(probs.iter().map(|(_, p)| Some(*p))).unwrap_or(0);
    if all_no {
        log::info!("every pairwise comparison answered no; keeping the best-ranked maximum");
    }
    Ok(PairwiseResult {
        best: probs[best_index].0.clone(),
        vlm_calls: probs.len() as u32,
        probs,
        all_no,
        unparseable,
    })
}

/// The concept a query resolved to, with the generated response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizedAnswer {
    pub concept_id: String,
    pub concept_name: String,
    /// `yes`/`no` for recognition, the caption or answer otherwise.
    pub text: String,
    pub trace: InferenceTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "task")]
pub enum Task {
    Recognition { target: String },
    Caption,
    Vqa { question: String, choices: Vec<String> },
}

/// Gateways plus configuration: everything a query needs besides the
/// database snapshot.
#[derive(Clone)]
pub struct Pipeline {
    encoder: Arc<dyn Encoder>,
    vlm: Arc<dyn Vlm>,
    images: Arc<dyn ImageStore>,
    config: PipelineConfig,
}

impl Pipeline {
    pub fn new(
        encoder: Arc<dyn Encoder>,
        vlm: Arc<dyn Vlm>,
        images: Arc<dyn ImageStore>,
        config: PipelineConfig,
    ) -> Result<Self, InferenceError> {
        config.validate()?;
        if !encoder.cross_modal()
            && matches!(
                config.retrieval_mode,
                RetrievalMode::Fused | RetrievalMode::TextOnly | RetrievalMode::TwoStep { .. }
            )
        {
            log::warn!(
                "encoder {} is not tagged cross-modal; image-to-text scores may be meaningless",
                encoder.encoder_id()
            );
        }
        Ok(Self {
            encoder,
            vlm,
            images,
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Same gateways, with `seed` forwarded to every chat request.
    pub fn with_seed(&self, seed: Option<u64>) -> Self {
        let mut p = self.clone();
        p.config.seed = seed;
        p
    }

    pub fn encoder(&self) -> &dyn Encoder {
        self.encoder.as_ref()
    }

    pub fn vlm(&self) -> &dyn Vlm {
        self.vlm.as_ref()
    }

    fn pairwise(
        &self,
        query: &ImagePayload,
        candidates: &CandidateSet,
        snapshot: &Snapshot,
    ) -> Result<PairwiseResult, InferenceError> {
        pairwise_refine(
            query,
            candidates,
            snapshot,
            self.vlm.as_ref(),
            self.images.as_ref(),
            &self.config,
        )
    }

    /// Resolves the query image to one enrolled concept.
    pub fn infer_concept(
        &self,
        query: &ImagePayload,
        snapshot: &Snapshot,
    ) -> Result<InferenceTrace, InferenceError> {
        let cfg = &self.config;
        if snapshot.is_empty() {
            return Err(RetrievalError::EmptyDatabase.into());
        }
        let query_embedding = self.encoder.encode_image(query)?;
        let candidates =
            retrieval::retrieve(&query_embedding, snapshot, cfg.k, cfg.retrieval_mode)?;
        let mut trace = InferenceTrace {
            c_tilde: rank_one(&candidates)?,
            final_concept: String::new(),
            candidate_set: candidates,
            cot_verdict: None,
            attribute_scores: None,
            c_tilde_a: None,
            verification_passed: None,
            pairwise_probs: None,
            vlm_calls: 0,
            flags: TraceFlags::default(),
        };

        let run_pairwise = if cfg.enable_cot {
            let sel = cot_select(query, &trace.candidate_set, snapshot, self.vlm.as_ref(), cfg)?;
            trace.vlm_calls += sel.vlm_calls;
            trace.c_tilde = sel.c_tilde.clone();
            trace.flags.cot_fallback = sel.verdict.is_none();
            trace.flags.uncertain = sel.uncertain || sel.idk_triggered;
            trace.cot_verdict = sel.verdict.clone();
            let passed = match cfg.verification {
                Verification::Attribute => {
                    let check = attribute_verify(
                        &query_embedding,
                        &sel.matched,
                        self.encoder.as_ref(),
                        &cfg.attribute_template,
                    )?;
                    let passed = check.c_tilde_a.as_deref() == Some(sel.c_tilde.as_str());
                    trace.attribute_scores = Some(check.scores.into_iter().collect());
                    trace.c_tilde_a = check.c_tilde_a;
                    Some(passed)
                }
                Verification::Abstention | Verification::LogitsBased => {
                    Some(!(sel.uncertain || sel.idk_triggered || sel.verdict.is_none()))
                }
                Verification::PairwiseAlways | Verification::None => None,
            };
            trace.verification_passed = passed;
            cfg.enable_pairwise
                && (cfg.verification == Verification::PairwiseAlways || passed == Some(false))
        } else {
            cfg.enable_pairwise
        };

        trace.final_concept = trace.c_tilde.clone();
        if run_pairwise {
            let pw = self.pairwise(query, &trace.candidate_set, snapshot)?;
            trace.vlm_calls += pw.vlm_calls;
            trace.flags.pairwise_all_no = pw.all_no;
            trace.flags.pairwise_unparseable = pw.unparseable;
            trace.final_concept = pw.best;
            trace.pairwise_probs = Some(pw.probs.into_iter().collect());
        }
        Ok(trace)
    }

    /// Pairwise check of the query against one named concept, skipping
    /// retrieval and reasoning.
    fn direct_pairwise(
        &self,
        query: &ImagePayload,
        target: &ConceptRecord,
        snapshot: &Snapshot,
    ) -> Result<(InferenceTrace, bool), InferenceError> {
        let q = self.encoder.encode_image(query)?;
        let s_vv = retrieval::cosine(&q, &target.visual_embedding).map_err(GatewayError::from)?;
        let s_vt = retrieval::cosine(&q, &target.textual_embedding).map_err(GatewayError::from)?;
        let candidates = CandidateSet {
            entries: vec![CandidateEntry {
                concept_id: target.concept_id.clone(),
                s_vv,
                s_vt,
                fused: retrieval::fuse(s_vv, s_vt),
            }],
            k: 1,
            mode: self.config.retrieval_mode,
        };
        let pw = self.pairwise(query, &candidates, snapshot)?;
        let p = pw.probs[0].1;
        let trace = InferenceTrace {
            candidate_set: candidates,
            cot_verdict: None,
            c_tilde: target.concept_id.clone(),
            attribute_scores: None,
            c_tilde_a: None,
            verification_passed: None,
            pairwise_probs: Some(pw.probs.into_iter().collect()),
            final_concept: target.concept_id.clone(),
            vlm_calls: pw.vlm_calls,
            flags: TraceFlags {
                pairwise_all_no: pw.all_no,
                pairwise_unparseable: pw.unparseable,
                ..TraceFlags::default()
            },
        };
        Ok((trace, p >= self.config.pairwise_threshold))
    }

    fn generate(
        &self,
        query: &ImagePayload,
        prompt: String,
        trace: &mut InferenceTrace,
    ) -> Result<String, InferenceError> {
        let request = ChatRequest::new(prompt)
            .image(query.clone())
            .max_tokens(ANSWER_MAX_TOKENS)
            .seed(self.config.seed);
        let response = self.vlm.chat(&request)?;
        trace.vlm_calls += 1;
        let text = response.text.trim().to_string();
        if text.is_empty() {
            return Err(GatewayError::MalformedResponse("empty answer text".into()).into());
        }
        Ok(text)
    }

    pub fn answer_query(
        &self,
        query: &ImagePayload,
        task: &Task,
        snapshot: &Snapshot,
    ) -> Result<PersonalizedAnswer, InferenceError> {
        if snapshot.is_empty() {
            return Err(RetrievalError::EmptyDatabase.into());
        }
        let resolved = |trace: &InferenceTrace| {
            snapshot
                .get(&trace.final_concept)
                .ok_or_else(|| InferenceError::MissingCandidate(trace.final_concept.clone()))
        };
        match task {
            Task::Recognition { target } => {
                let target_record = snapshot
                    .by_name(target)
                    .ok_or_else(|| InferenceError::UnknownTargetConcept(target.clone()))?;
                let (trace, yes) = match self.config.recognition_mode {
                    RecognitionMode::PipelineMatch => {
                        let trace = self.infer_concept(query, snapshot)?;
                        let yes = trace.final_concept == target_record.concept_id;
                        (trace, yes)
                    }
                    RecognitionMode::DirectPairwise => {
                        self.direct_pairwise(query, target_record, snapshot)?
                    }
                };
                let record = resolved(&trace)?;
                Ok(PersonalizedAnswer {
                    concept_id: record.concept_id.clone(),
                    concept_name: record.name.clone(),
                    text: if yes { "yes" } else { "no" }.to_string(),
                    trace,
                })
            }
            Task::Caption => {
                let mut trace = self.infer_concept(query, snapshot)?;
                let record = resolved(&trace)?;
                let prompt = protocol::render_caption_prompt(&record.name, &record.description)?;
                let text = self.generate(query, prompt, &mut trace)?;
                Ok(PersonalizedAnswer {
                    concept_id: record.concept_id.clone(),
                    concept_name: record.name.clone(),
                    text,
                    trace,
                })
            }
            Task::Vqa { question, choices } => {
                let mut trace = self.infer_concept(query, snapshot)?;
                let record = resolved(&trace)?;
                let prompt = protocol::render_vqa_prompt(
                    &record.name,
                    &record.description,
                    question,
                    choices,
                )?;
                let text = self.generate(query, prompt, &mut trace)?;
                Ok(PersonalizedAnswer {
                    concept_id: record.concept_id.clone(),
                    concept_name: record.name.clone(),
                    text,
                    trace,
                })
            }
        }
    }
}
