//! Multimodal chat model gateway.
//!
//! Requests carry up to two images and a text prompt. Responses carry the
//! generated text and, when asked for, the log-probabilities of the
//! alternatives at the answer-token position (the token holding the value of
//! the `"Answer"` key in the JSON the prompts ask for).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::encoder::secs;
use super::{join_url, BackendKind, GatewayError, HttpJson, RetryPolicy};
use crate::image::{mock_label, ImagePayload};
use crate::protocol;

/// Number of alternatives requested per generated token.
pub const TOP_LOGPROBS: u32 = 20;

/// Probability assigned to a text-only yes/no answer.
pub const TEXT_FALLBACK_CONFIDENCE: f64 = 0.99;

#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub images: Vec<ImagePayload>,
    pub prompt_text: String,
    pub want_logprobs: bool,
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(prompt_text: impl Into<String>) -> Self {
        Self {
            images: Vec::new(),
            prompt_text: prompt_text.into(),
            want_logprobs: false,
            max_tokens: 512,
            temperature: 0.0,
            seed: None,
        }
    }

    pub fn image(mut self, image: ImagePayload) -> Self {
        self.images.push(image);
        self
    }

    pub fn logprobs(mut self, want: bool) -> Self {
        self.want_logprobs = want;
        self
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt_text.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("prompt text is empty".into()));
        }
        if self.images.len() > 2 {
            return Err(GatewayError::InvalidRequest(format!(
                "at most 2 images per request, got {}",
                self.images.len()
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    /// Token string to log-probability at the answer position.
    pub answer_logprobs: Option<BTreeMap<String, f64>>,
}

pub trait Vlm: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YesNo {
    Yes,
    No,
}

/// How the yes/no log-probabilities become a probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YesNoMode {
    /// Two-way softmax over the yes/no log-probabilities.
    #[default]
    Softmax,
    /// Raw ratio `yes / (yes + no)` of the reported values, clamped to [0, 1].
    LiteralRatio,
}

#[derive(Debug, Clone, PartialEq)]
pub struct YesNoOutcome {
    pub answer: YesNo,
    pub p: f64,
    pub from_logprobs: bool,
    pub text: String,
}

/// `exp(yes) / (exp(yes) + exp(no))`, computed without overflow.
pub fn two_way_softmax(yes: f64, no: f64) -> f64 {
    1.0 / (1.0 + (no - yes).exp())
}

fn literal_ratio(yes: f64, no: f64) -> f64 {
    let denom = yes + no;
    if denom == 0.0 {
        0.5
    } else {
        (yes / denom).clamp(0.0, 1.0)
    }
}

/// Lower-cased token with surrounding whitespace and quote characters removed.
pub fn normalize_token(token: &str) -> String {
    token
        .trim_matches(|c: char| c.is_whitespace() || matches!(c, '"' | '\'' | '`'))
        .to_lowercase()
}

fn log_sum_exp(values: &[f64]) -> Option<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    Some(max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln())
}

/// Aggregated log-probability of every token variant normalizing to `word`.
pub fn word_logprob(logprobs: &BTreeMap<String, f64>, word: &str) -> Option<f64> {
    let matches: Vec<f64> = logprobs
        .iter()
        .filter(|(t, _)| normalize_token(t) == word)
        .map(|(_, &lp)| lp)
        .collect();
    log_sum_exp(&matches)
}

/// Yes/no log-probabilities from an answer-position distribution. A word
/// missing from the top alternatives is bounded by the smallest listed value.
pub fn yes_no_logprobs(logprobs: &BTreeMap<String, f64>) -> Option<(f64, f64)> {
    let yes = word_logprob(logprobs, "yes");
    let no = word_logprob(logprobs, "no");
    let floor = logprobs.values().copied().fold(f64::INFINITY, f64::min);
    match (yes, no) {
        (Some(y), Some(n)) => Some((y, n)),
        (Some(y), None) => Some((y, floor.min(y))),
        (None, Some(n)) => Some((floor.min(n), n)),
        (None, None) => None,
    }
}

/// Asks a yes/no question and turns the answer token's log-probabilities
/// into `p(yes)`. Falls back to the parsed text answer with confidence
/// [`TEXT_FALLBACK_CONFIDENCE`] when log-probabilities are unavailable.
pub fn yes_no_probability(
    vlm: &dyn Vlm,
    request: &ChatRequest,
    mode: YesNoMode,
) -> Result<YesNoOutcome, GatewayError> {
    let response = vlm.chat(request)?;
    if let Some((yes, no)) = response.answer_logprobs.as_ref().and_then(yes_no_logprobs) {
        let p = match mode {
            YesNoMode::Softmax => two_way_softmax(yes, no),
            YesNoMode::LiteralRatio => literal_ratio(yes, no),
        };
        let answer = if p >= 0.5 { YesNo::Yes } else { YesNo::No };
        return Ok(YesNoOutcome {
            answer,
            p,
            from_logprobs: true,
            text: response.text,
        });
    }
    match protocol::parse_pairwise(&response.text) {
        Ok(reply) => Ok(YesNoOutcome {
            answer: reply.answer,
            p: match reply.answer {
                YesNo::Yes => TEXT_FALLBACK_CONFIDENCE,
                YesNo::No => 1.0 - TEXT_FALLBACK_CONFIDENCE,
            },
            from_logprobs: false,
            text: response.text,
        }),
        Err(_) => Err(GatewayError::AnswerUnparseable(response.text)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VlmBackendConfig {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    pub api_key_env: Option<String>,
    pub model_id: String,
    #[serde(with = "secs")]
    pub timeout: Duration,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// Mock only: JSON array of scripted turns.
    pub mock_script: Option<PathBuf>,
}

impl Default for VlmBackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            base_url: None,
            api_key_env: None,
            model_id: "mock-vlm".into(),
            timeout: Duration::from_secs(120),
            max_retries: 3,
            max_in_flight: 2,
            mock_script: None,
        }
    }
}

pub fn build_vlm(config: &VlmBackendConfig) -> Result<Arc<dyn Vlm>, GatewayError> {
    Ok(match config.kind {
        BackendKind::Mock => {
            let path = config.mock_script.as_ref().ok_or_else(|| {
                GatewayError::Config("mock VLM requires a script file".into())
            })?;
            Arc::new(MockVlm::from_file(path)?)
        }
        BackendKind::Remote => Arc::new(RemoteVlm::new(config)?),
    })
}

/// Matching rule of a scripted turn. Every present field must hold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TurnMatcher {
    /// Exact list of image labels, in request order.
    pub images: Option<Vec<String>>,
    pub prompt_contains: Option<String>,
    pub prompt_excludes: Option<String>,
}

impl TurnMatcher {
    fn matches(&self, labels: &[String], prompt: &str) -> bool {
        self.images.as_ref().is_none_or(|want| want == labels)
            && self
                .prompt_contains
                .as_ref()
                .is_none_or(|s| prompt.contains(s.as_str()))
            && self
                .prompt_excludes
                .as_ref()
                .is_none_or(|s| !prompt.contains(s.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedTurn {
    #[serde(default)]
    pub matcher: TurnMatcher,
    pub response_text: String,
    #[serde(default)]
    pub yes_logit: Option<f64>,
    #[serde(default)]
    pub no_logit: Option<f64>,
    /// Full answer-position distribution; takes precedence over the
    /// yes/no pair.
    #[serde(default)]
    pub answer_logprobs: Option<BTreeMap<String, f64>>,
}

impl ScriptedTurn {
    pub fn new(matcher: TurnMatcher, response_text: impl Into<String>) -> Self {
        Self {
            matcher,
            response_text: response_text.into(),
            yes_logit: None,
            no_logit: None,
            answer_logprobs: None,
        }
    }

    pub fn with_yes_no(mut self, yes: f64, no: f64) -> Self {
        self.yes_logit = Some(yes);
        self.no_logit = Some(no);
        self
    }

    pub fn with_logprobs(mut self, logprobs: BTreeMap<String, f64>) -> Self {
        self.answer_logprobs = Some(logprobs);
        self
    }

    fn logprobs(&self) -> Option<BTreeMap<String, f64>> {
        if let Some(map) = &self.answer_logprobs {
            return Some(map.clone());
        }
        let mut map = BTreeMap::new();
        if let Some(y) = self.yes_logit {
            map.insert("yes".to_string(), y);
        }
        if let Some(n) = self.no_logit {
            map.insert("no".to_string(), n);
        }
        (!map.is_empty()).then_some(map)
    }
}

/// A request as seen by the mock, kept for assertions.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedRequest {
    pub image_labels: Vec<String>,
    pub prompt_text: String,
    pub want_logprobs: bool,
}

/// Scripted VLM: each request must match exactly one turn.
#[derive(Debug, Default)]
pub struct MockVlm {
    turns: Vec<ScriptedTurn>,
    log: Mutex<Vec<RecordedRequest>>,
}

impl MockVlm {
    pub fn new(turns: Vec<ScriptedTurn>) -> Self {
        Self {
            turns,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            GatewayError::Config(format!("cannot read VLM script {}: {e}", path.display()))
        })?;
        let turns = serde_json::from_str(&text).map_err(|e| {
            GatewayError::Config(format!("bad VLM script {}: {e}", path.display()))
        })?;
        Ok(Self::new(turns))
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.log.lock().expect("mock log poisoned").clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().expect("mock log poisoned").len()
    }
}

fn prompt_prefix(prompt: &str) -> String {
    prompt.chars().take(80).collect()
}

impl Vlm for MockVlm {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let labels: Vec<String> = request.images.iter().map(mock_label).collect();
        self.log.lock().expect("mock log poisoned").push(RecordedRequest {
            image_labels: labels.clone(),
            prompt_text: request.prompt_text.clone(),
            want_logprobs: request.want_logprobs,
        });
        let hits: Vec<&ScriptedTurn> = self
            .turns
            .iter()
            .filter(|t| t.matcher.matches(&labels, &request.prompt_text))
            .collect();
        let turn = match hits.as_slice() {
            [one] => *one,
            [] => {
                return Err(GatewayError::ScriptMiss {
                    prompt_prefix: prompt_prefix(&request.prompt_text),
                    images: labels,
                })
            }
            many => {
                return Err(GatewayError::ScriptAmbiguous {
                    prompt_prefix: prompt_prefix(&request.prompt_text),
                    count: many.len(),
                })
            }
        };
        if turn.response_text.trim().is_empty() {
            return Err(GatewayError::MalformedResponse("empty response text".into()));
        }
        Ok(ChatResponse {
            text: turn.response_text.clone(),
            answer_logprobs: if request.want_logprobs {
                turn.logprobs()
            } else {
                None
            },
        })
    }
}

/// Client for OpenAI-compatible `/chat/completions` endpoints.
pub struct RemoteVlm {
    http: HttpJson,
    url: String,
    model_id: String,
}

impl RemoteVlm {
    pub fn new(config: &VlmBackendConfig) -> Result<Self, GatewayError> {
        let base = config
            .base_url
            .as_deref()
            .filter(|u| !u.is_empty())
            .ok_or_else(|| GatewayError::Config("remote VLM requires base_url".into()))?;
        let retry = RetryPolicy {
            max_retries: config.max_retries,
            ..RetryPolicy::default()
        };
        Ok(Self {
            http: HttpJson::new(
                config.timeout,
                config.api_key_env.as_deref(),
                retry,
                config.max_in_flight,
            )?,
            url: join_url(base, "chat/completions"),
            model_id: config.model_id.clone(),
        })
    }

    /// Request body for `request`: the text part first, then images in order.
    pub fn request_body(&self, request: &ChatRequest) -> Value {
        render_chat_body(&self.model_id, request)
    }
}

pub fn render_chat_body(model_id: &str, request: &ChatRequest) -> Value {
    let mut content = vec![json!({ "type": "text", "text": request.prompt_text })];
    for image in &request.images {
        let b64 = base64::engine::general_purpose::STANDARD.encode(image.bytes());
        content.push(json!({
            "type": "image_url",
            "image_url": { "url": format!("data:{};base64,{b64}", image.media_type().mime()) }
        }));
    }
    let mut body = json!({
        "model": model_id,
        "messages": [{ "role": "user", "content": content }],
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    });
    if request.want_logprobs {
        body["logprobs"] = json!(true);
        body["top_logprobs"] = json!(TOP_LOGPROBS);
    }
    if let Some(seed) = request.seed {
        body["seed"] = json!(seed);
    }
    body
}

/// Extracts text and answer-position log-probabilities from a chat
/// completion response.
pub fn parse_chat_response(body: &Value) -> Result<ChatResponse, GatewayError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::MalformedResponse("missing choices[0]".into()))?;
    if choice.get("finish_reason").and_then(Value::as_str) == Some("length") {
        return Err(GatewayError::ResponseTruncated);
    }
    let content = choice
        .get("message")
        .and_then(|m| m.get("content"))
        .ok_or_else(|| GatewayError::MalformedResponse("missing message content".into()))?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        _ => return Err(GatewayError::MalformedResponse("content is not text".into())),
    };
    if text.trim().is_empty() {
        return Err(GatewayError::MalformedResponse("empty response text".into()));
    }
    let tokens = choice
        .get("logprobs")
        .and_then(|l| l.get("content"))
        .and_then(Value::as_array)
        .map(|arr| arr.iter().filter_map(TokenLogprob::from_json).collect::<Vec<_>>());
    Ok(ChatResponse {
        text,
        answer_logprobs: tokens.and_then(|t| answer_token_logprobs(&t)),
    })
}

/// One generated token with its top alternatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    pub top: Vec<(String, f64)>,
}

impl TokenLogprob {
    fn from_json(v: &Value) -> Option<Self> {
        let token = v.get("token")?.as_str()?.to_string();
        let logprob = v.get("logprob")?.as_f64()?;
        let top = v
            .get("top_logprobs")
            .and_then(Value::as_array)
            .map(|alts| {
                alts.iter()
                    .filter_map(|a| {
                        Some((a.get("token")?.as_str()?.to_string(), a.get("logprob")?.as_f64()?))
                    })
                    .collect()
            })
            .unwrap_or_default();
        Some(Self { token, logprob, top })
    }
}

/// Finds the token holding the value of the last `"Answer"` key and returns
/// its alternatives (including the sampled token itself).
pub fn answer_token_logprobs(tokens: &[TokenLogprob]) -> Option<BTreeMap<String, f64>> {
    let mut text = String::new();
    let mut spans = Vec::with_capacity(tokens.len());
    for t in tokens {
        let start = text.len();
        text.push_str(&t.token);
        spans.push((start, text.len()));
    }
    let lower = text.to_ascii_lowercase();
    let offset = lower
        .rmatch_indices("answer")
        .find_map(|(key, m)| value_offset(&lower, key + m.len()))?;
    let idx = spans.iter().position(|&(s, e)| s <= offset && offset < e)?;
    let tok = &tokens[idx];
    let mut map: BTreeMap<String, f64> = tok.top.iter().cloned().collect();
    map.entry(tok.token.clone()).or_insert(tok.logprob);
    Some(map)
}

/// Byte offset of the first value character after `"key":`, if the text at
/// `after_key` continues as a JSON key separator.
fn value_offset(text: &str, after_key: usize) -> Option<usize> {
    let mut offset = after_key;
    let mut seen_colon = false;
    for c in text[after_key..].chars() {
        match c {
            ':' if !seen_colon => seen_colon = true,
            c if c.is_whitespace() || matches!(c, '"' | '\'' | '`') => {}
            _ => break,
        }
        offset += c.len_utf8();
    }
    (seen_colon && offset < text.len()).then_some(offset)
}

impl Vlm for RemoteVlm {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let body = self.request_body(request);
        let resp = self.http.post(&self.url, &body)?;
        parse_chat_response(&resp)
    }
}
