//! Prompt templates and strict parsing of the JSON replies they request.
//!
//! Replies go through a recovery ladder: the first balanced `{...}` block is
//! cut out of any fences or surrounding prose, keys are matched
//! case-insensitively, and callers may re-ask the model once with
//! [`REASK_REMINDER`] appended (see [`ask_with_reask`]).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::db::ConceptRecord;
use crate::gateway::{ChatRequest, GatewayError, Vlm, YesNo};

pub const ENROLLMENT_TEMPLATE: &str = include_str!("../prompts/enrollment.txt");
pub const COT_TEMPLATE: &str = include_str!("../prompts/cot.txt");
pub const PAIRWISE_TEMPLATE: &str = include_str!("../prompts/pairwise.txt");
pub const CAPTION_TEMPLATE: &str = include_str!("../prompts/caption.txt");
pub const VQA_TEMPLATE: &str = include_str!("../prompts/vqa.txt");

/// Appended to the prompt when the first reply could not be parsed.
pub const REASK_REMINDER: &str =
    "IMPORTANT: Output only the JSON object described above, with no other text.";

/// Answer the model gives in abstention mode.
pub const ABSTAIN_ANSWER: &str = "I am not sure";

/// Text of the extra option offered in logits-based verification.
pub const IDK_OPTION: &str = "I don't know";

const MAX_ATTRIBUTE_CHARS: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("between 1 and 26 options can be presented, got {0}")]
    OptionCount(usize),
}

/// Rung of the recovery ladder at which parsing gave up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryStage {
    /// No balanced JSON object could be located.
    Extraction,
    /// A block was found but is not valid JSON.
    Syntax,
    /// Valid JSON that does not fit the expected schema.
    Schema,
    /// The re-asked reply failed as well.
    Reask,
}

impl fmt::Display for RecoveryStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RecoveryStage::Extraction => "extraction",
            RecoveryStage::Syntax => "syntax",
            RecoveryStage::Schema => "schema",
            RecoveryStage::Reask => "re-ask",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("could not parse model reply at {stage} stage: {reason}")]
pub struct ParseFailure {
    pub raw: String,
    pub stage: RecoveryStage,
    pub reason: String,
}

impl ParseFailure {
    fn new(raw: &str, stage: RecoveryStage, reason: impl Into<String>) -> Self {
        Self {
            raw: raw.to_string(),
            stage,
            reason: reason.into(),
        }
    }
}

fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in pairs {
        out = out.replace(&format!("⟨{key}⟩"), value);
    }
    out
}

fn require(value: &str, what: &'static str) -> Result<(), RenderError> {
    if value.trim().is_empty() {
        Err(RenderError::Empty(what))
    } else {
        Ok(())
    }
}

pub fn option_letter(index: usize) -> char {
    (b'A' + index as u8) as char
}

fn join_letters(letters: &[char]) -> String {
    letters
        .iter()
        .map(char::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

fn count_phrase(n: usize) -> String {
    const WORDS: [&str; 11] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    ];
    let num = WORDS.get(n).map_or_else(|| n.to_string(), |w| (*w).to_string());
    if n == 1 {
        format!("{num} provided description")
    } else {
        format!("{num} provided descriptions")
    }
}

fn feature_list(attributes: &[String]) -> String {
    format!("[{}]", attributes.join(", "))
}

pub fn render_enrollment_prompt(category: &str, name: &str) -> Result<String, RenderError> {
    require(category, "category")?;
    require(name, "name")?;
    Ok(fill(
        ENROLLMENT_TEMPLATE,
        &[("category", category.trim()), ("name", name.trim())],
    ))
}

/// How the reasoning prompt lets the model express uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Uncertainty {
    #[default]
    None,
    /// Instructs the model to answer [`ABSTAIN_ANSWER`] when unsure.
    Abstain,
    /// Adds a final option letter labelled [`IDK_OPTION`].
    IdkOption,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CotPromptOptions {
    pub include_attributes: bool,
    pub uncertainty: Uncertainty,
}

impl Default for CotPromptOptions {
    fn default() -> Self {
        Self {
            include_attributes: true,
            uncertainty: Uncertainty::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CotPrompt {
    pub text: String,
    /// Option letter to concept id, in presentation (retrieval rank) order.
    pub letter_map: BTreeMap<char, String>,
    pub idk_letter: Option<char>,
}

impl CotPrompt {
    pub fn candidate_letters(&self) -> Vec<char> {
        self.letter_map.keys().copied().collect()
    }

    pub fn parse_options(&self, uncertainty: Uncertainty) -> CotParseOptions {
        CotParseOptions {
            letters: self.candidate_letters(),
            idk_letter: self.idk_letter,
            allow_abstain: uncertainty == Uncertainty::Abstain,
        }
    }
}

pub fn render_cot_prompt(candidates: &[&ConceptRecord]) -> Result<CotPrompt, RenderError> {
    render_cot_prompt_with(candidates, &CotPromptOptions::default())
}

pub fn render_cot_prompt_with(
    candidates: &[&ConceptRecord],
    options: &CotPromptOptions,
) -> Result<CotPrompt, RenderError> {
    let extra = usize::from(options.uncertainty == Uncertainty::IdkOption);
    if candidates.is_empty() || candidates.len() + extra > 26 {
        return Err(RenderError::OptionCount(candidates.len() + extra));
    }
    let mut letter_map = BTreeMap::new();
    let mut blocks = Vec::new();
    let mut json_lines = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let letter = option_letter(i);
        letter_map.insert(letter, c.concept_id.clone());
        let info = if options.include_attributes {
            format!(
                "{{general: {}, category: {}, distinct features: {}}}",
                c.description,
                c.category,
                feature_list(&c.attributes)
            )
        } else {
            format!("{{general: {}, category: {}}}", c.description, c.category)
        };
        blocks.push(format!("{letter}. Name: {},\n\nInfo: {info}", c.name));
        json_lines.push(format!(
            "  \"{letter}\": \"[Matching attributes for option {letter}]\","
        ));
    }
    let mut letters: Vec<char> = letter_map.keys().copied().collect();
    let idk_letter = (options.uncertainty == Uncertainty::IdkOption).then(|| {
        let letter = option_letter(candidates.len());
        blocks.push(format!("{letter}. {IDK_OPTION}"));
        letters.push(letter);
        letter
    });
    let uncertainty = match options.uncertainty {
        Uncertainty::Abstain => format!(
            "- If you are not sure which description matches, answer \"{ABSTAIN_ANSWER}\".\n"
        ),
        _ => String::new(),
    };
    let letters = join_letters(&letters);
    let text = fill(
        COT_TEMPLATE,
        &[
            ("count", &count_phrase(candidates.len())),
            ("options", &blocks.join("\n\n")),
            ("letters", &letters),
            ("uncertainty", &uncertainty),
            ("json_options", &json_lines.join("\n")),
        ],
    );
    Ok(CotPrompt {
        text,
        letter_map,
        idk_letter,
    })
}

pub fn render_pairwise_prompt(candidate: &ConceptRecord) -> Result<String, RenderError> {
    render_pairwise_prompt_with(candidate, true)
}

pub fn render_pairwise_prompt_with(
    candidate: &ConceptRecord,
    include_attributes: bool,
) -> Result<String, RenderError> {
    require(&candidate.name, "candidate name")?;
    require(&candidate.description, "candidate description")?;
    let features = if include_attributes {
        if candidate.attributes.is_empty() {
            log::warn!(
                "rendering pairwise prompt for {:?} with no fingerprint attributes",
                candidate.name
            );
        }
        format!(",\ndistinct features: {}", feature_list(&candidate.attributes))
    } else {
        String::new()
    };
    Ok(fill(
        PAIRWISE_TEMPLATE,
        &[
            ("name", &candidate.name),
            ("description", &candidate.description),
            ("category", &candidate.category),
            ("features", &features),
        ],
    ))
}

fn sentence(text: &str) -> String {
    let t = text.trim();
    if t.ends_with(['.', '!', '?']) {
        t.to_string()
    } else {
        format!("{t}.")
    }
}

pub fn render_caption_prompt(name: &str, description: &str) -> Result<String, RenderError> {
    require(name, "name")?;
    require(description, "description")?;
    Ok(fill(
        CAPTION_TEMPLATE,
        &[("name", name.trim()), ("description", &sentence(description))],
    ))
}

/// `choices` are rendered as lettered options `A. ...`.
pub fn render_vqa_prompt(
    name: &str,
    description: &str,
    question: &str,
    choices: &[String],
) -> Result<String, RenderError> {
    require(name, "name")?;
    require(description, "description")?;
    require(question, "question")?;
    if choices.len() > 26 {
        return Err(RenderError::OptionCount(choices.len()));
    }
    let choices = choices
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {c}", option_letter(i)))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(fill(
        VQA_TEMPLATE,
        &[
            ("name", name.trim()),
            ("description", &sentence(description)),
            ("question", question.trim()),
            ("choices", &choices),
        ],
    ))
}

/// Returns the first balanced `{...}` block, ignoring braces inside JSON
/// strings. Markdown fences and surrounding prose fall away naturally.
pub fn extract_json_block(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in raw[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&raw[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Removes commas directly preceding a closing bracket, outside strings.
fn strip_trailing_commas(block: &str) -> String {
    let mut out = String::with_capacity(block.len());
    let mut in_string = false;
    let mut escaped = false;
    let chars: Vec<char> = block.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
        } else if c == '"' {
            in_string = true;
        } else if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

fn parse_object(raw: &str) -> Result<Map<String, Value>, ParseFailure> {
    let block = extract_json_block(raw)
        .ok_or_else(|| ParseFailure::new(raw, RecoveryStage::Extraction, "no JSON object found"))?;
    let value: Value = match serde_json::from_str(block) {
        Ok(v) => v,
        Err(first) => serde_json::from_str(&strip_trailing_commas(block))
            .map_err(|_| ParseFailure::new(raw, RecoveryStage::Syntax, first.to_string()))?,
    };
    match value {
        Value::Object(map) => Ok(map),
        _ => Err(ParseFailure::new(raw, RecoveryStage::Syntax, "not a JSON object")),
    }
}

/// Lower-cased key with `_`/`-` treated as spaces and whitespace collapsed.
fn key_norm(key: &str) -> String {
    key.to_lowercase()
        .replace(['_', '-'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

struct Fields(BTreeMap<String, Value>);

impl Fields {
    fn new(map: Map<String, Value>) -> Self {
        Self(map.into_iter().map(|(k, v)| (key_norm(&k), v)).collect())
    }

    fn get(&self, key: &str) -> Option<&Value> {
        self.0.get(key)
    }

    fn string(&self, key: &str) -> Option<String> {
        match self.get(key)? {
            Value::String(s) => Some(s.trim().to_string()),
            Value::Null => None,
            other => Some(other.to_string()),
        }
    }
}

fn is_none_marker(s: &str) -> bool {
    matches!(
        s.trim().to_lowercase().as_str(),
        "" | "none" | "n/a" | "na" | "null" | "[none]" | "[]"
    )
}

/// Splits on commas that are not nested inside brackets.
fn split_top_level(s: &str) -> Vec<String> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut current = String::new();
    for c in s.chars() {
        match c {
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => depth -= 1,
            ',' if depth <= 0 => {
                parts.push(std::mem::take(&mut current));
                continue;
            }
            _ => {}
        }
        current.push(c);
    }
    parts.push(current);
    parts
}

fn clean_item(s: &str) -> String {
    s.trim()
        .trim_matches(|c| matches!(c, '"' | '\''))
        .trim()
        .to_string()
}

/// Normalizes an attribute field given either as a list or as a
/// comma-separated string. `None`-like values yield an empty list.
pub fn attribute_list(value: &Value) -> Vec<String> {
    let items: Vec<String> = match value {
        Value::Null => Vec::new(),
        Value::Array(items) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            })
            .collect(),
        Value::String(s) => {
            let t = s.trim();
            let inner = t
                .strip_prefix('[')
                .and_then(|r| r.strip_suffix(']'))
                .unwrap_or(t);
            if is_none_marker(inner) {
                Vec::new()
            } else {
                split_top_level(inner)
            }
        }
        other => vec![other.to_string()],
    };
    items
        .iter()
        .map(|s| clean_item(s))
        .filter(|s| !is_none_marker(s))
        .collect()
}

fn dedup_case_insensitive(items: Vec<String>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    items
        .into_iter()
        .filter(|s| seen.insert(s.to_lowercase()))
        .collect()
}

fn truncate_chars(s: String, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((idx, _)) => s[..idx].trim_end().to_string(),
        None => s,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrollmentReply {
    pub general: String,
    pub category: String,
    pub distinct_features: Vec<String>,
}

pub fn parse_enrollment(raw: &str) -> Result<EnrollmentReply, ParseFailure> {
    let fields = Fields::new(parse_object(raw)?);
    let schema = |reason: String| ParseFailure::new(raw, RecoveryStage::Schema, reason);
    const KEYS: [&str; 3] = ["general", "category", "distinct features"];
    if let Some(extra) = fields.0.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(schema(format!("unexpected key {extra:?}")));
    }
    let general = fields
        .string("general")
        .filter(|s| !s.is_empty())
        .ok_or_else(|| schema("missing or empty \"general\"".into()))?;
    let category = fields
        .string("category")
        .ok_or_else(|| schema("missing \"category\"".into()))?;
    let features = fields
        .get("distinct features")
        .ok_or_else(|| schema("missing \"distinct features\"".into()))?;
    let distinct_features = dedup_case_insensitive(
        attribute_list(features)
            .into_iter()
            .map(|s| truncate_chars(s, MAX_ATTRIBUTE_CHARS))
            .collect(),
    );
    if distinct_features.is_empty() {
        return Err(schema("\"distinct features\" is empty".into()));
    }
    Ok(EnrollmentReply {
        general,
        category,
        distinct_features,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CotAnswer {
    Letter(char),
    /// Abstained or picked the "I don't know" option.
    Unsure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotVerdict {
    /// Shared attributes per presented candidate letter.
    pub matched_attributes: BTreeMap<char, Vec<String>>,
    pub reasoning: String,
    pub answer: CotAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CotParseOptions {
    pub letters: Vec<char>,
    pub idk_letter: Option<char>,
    pub allow_abstain: bool,
}

impl CotParseOptions {
    pub fn letters(letters: &[char]) -> Self {
        Self {
            letters: letters.to_vec(),
            idk_letter: None,
            allow_abstain: false,
        }
    }
}

fn is_abstention(answer: &str) -> bool {
    let a = answer
        .trim()
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_lowercase()
        .replace('’', "'");
    matches!(
        a.as_str(),
        "i am not sure" | "i'm not sure" | "not sure" | "unsure" | "i don't know" | "i do not know"
    )
}

/// Reads an option letter from answers like `B`, `"b."`, `B) Mug` or
/// `Option B`.
fn answer_letter(answer: &str) -> Option<char> {
    let a = answer
        .trim()
        .trim_matches(|c| matches!(c, '"' | '\'' | '`' | '[' | '('))
        .trim();
    let upper = a.to_uppercase();
    let body = upper.strip_prefix("OPTION").map_or(upper.as_str(), str::trim_start);
    let mut chars = body.chars();
    let first = chars.next().filter(char::is_ascii_uppercase)?;
    match chars.next() {
        None => Some(first),
        Some(c) if !c.is_alphanumeric() => Some(first),
        _ => None,
    }
}

pub fn parse_cot(raw: &str, options: &CotParseOptions) -> Result<CotVerdict, ParseFailure> {
    let fields = Fields::new(parse_object(raw)?);
    let schema = |reason: String| ParseFailure::new(raw, RecoveryStage::Schema, reason);
    let answer_text = fields
        .string("answer")
        .ok_or_else(|| schema("missing \"Answer\"".into()))?;
    let answer = if options.allow_abstain && is_abstention(&answer_text) {
        CotAnswer::Unsure
    } else {
        match answer_letter(&answer_text) {
            Some(l) if options.letters.contains(&l) => CotAnswer::Letter(l),
            Some(l) if options.idk_letter == Some(l) => CotAnswer::Unsure,
            _ => {
                return Err(schema(format!(
                    "answer {answer_text:?} is not one of {}",
                    join_letters(&options.letters)
                )))
            }
        }
    };
    let matched_attributes = options
        .letters
        .iter()
        .map(|&l| {
            let attrs = fields
                .get(&l.to_lowercase().to_string())
                .map(attribute_list)
                .unwrap_or_default();
            (l, attrs)
        })
        .collect();
    Ok(CotVerdict {
        matched_attributes,
        reasoning: fields.string("reasoning").unwrap_or_default(),
        answer,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseReply {
    pub reasoning: String,
    pub answer: YesNo,
}

fn yes_no_word(s: &str) -> Option<YesNo> {
    let w = s
        .trim()
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_lowercase();
    match w.as_str() {
        "yes" => Some(YesNo::Yes),
        "no" => Some(YesNo::No),
        _ => None,
    }
}

/// Parses the pairwise JSON reply; a bare `yes`/`no` reply is accepted too.
pub fn parse_pairwise(raw: &str) -> Result<PairwiseReply, ParseFailure> {
    let map = match parse_object(raw) {
        Ok(map) => map,
        Err(e) => {
            return match yes_no_word(raw) {
                Some(answer) => Ok(PairwiseReply {
                    reasoning: String::new(),
                    answer,
                }),
                None => Err(e),
            }
        }
    };
    let fields = Fields::new(map);
    let answer = fields
        .string("answer")
        .ok_or_else(|| ParseFailure::new(raw, RecoveryStage::Schema, "missing \"Answer\""))?;
    let answer = yes_no_word(&answer).ok_or_else(|| {
        ParseFailure::new(
            raw,
            RecoveryStage::Schema,
            format!("answer {answer:?} is neither yes nor no"),
        )
    })?;
    Ok(PairwiseReply {
        reasoning: fields.string("reasoning").unwrap_or_default(),
        answer,
    })
}

/// Result of a parsed exchange with one optional re-ask.
#[derive(Debug)]
pub struct Asked<T> {
    pub value: Result<T, ParseFailure>,
    pub calls: u32,
    /// Text of the last reply.
    pub raw: String,
    /// Answer-token log-probabilities of the last reply, when requested.
    pub answer_logprobs: Option<BTreeMap<String, f64>>,
}

/// Sends `request`, parses the reply and, when parsing fails, asks once more
/// with [`REASK_REMINDER`] appended. Gateway errors are returned as-is.
pub fn ask_with_reask<T>(
    vlm: &dyn Vlm,
    request: &ChatRequest,
    parse: impl Fn(&str) -> Result<T, ParseFailure>,
) -> Result<Asked<T>, GatewayError> {
    let first = vlm.chat(request)?;
    match parse(&first.text) {
        Ok(v) => Ok(Asked {
            value: Ok(v),
            calls: 1,
            raw: first.text,
            answer_logprobs: first.answer_logprobs,
        }),
        Err(e) => {
            log::warn!("unparseable reply ({e}); re-asking once");
            let mut retry = request.clone();
            retry.prompt_text = format!("{}\n\n{REASK_REMINDER}", request.prompt_text.trim_end());
            let second = vlm.chat(&retry)?;
            let value = parse(&second.text).map_err(|mut e| {
                e.stage = RecoveryStage::Reask;
                e
            });
            Ok(Asked {
                value,
                calls: 2,
                raw: second.text,
                answer_logprobs: second.answer_logprobs,
            })
        }
    }
}
