//! Scripted world shared by the integration tests: four mugs whose
//! similarities to a single query image are pinned through encoder
//! fixtures, plus helpers for scripting the chat model.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use r2p_core::db::{ConceptRecord, Database};
use r2p_core::embedding::Embedding;
use r2p_core::gateway::{Encoder, MockEncoder, MockVlm, ScriptedTurn, TurnMatcher, Vlm};
use r2p_core::image::{labeled_png, ImagePayload, ImageRef, MemoryImageStore};
use r2p_core::inference::{Pipeline, PipelineConfig};

pub const DIM: usize = 4;
pub const QUERY: &str = "query";
pub const COT_MARKER: &str = "Which description matches";
pub const PAIRWISE_MARKER: &str = "Can you see";

/// Unit vector whose cosine with the query `[1, 0, 0, 0]` is `x`.
pub fn with_query_cosine(x: f64, axis: usize) -> Vec<f64> {
    let mut v = vec![0.0; DIM];
    v[0] = x;
    v[axis] = (1.0 - x * x).sqrt();
    v
}

pub fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

pub fn png(label: &str) -> ImagePayload {
    ImagePayload::new(labeled_png(label)).unwrap()
}

/// (id, name, query cosine, axis, attributes)
pub const MUGS: [(&str, &str, f64, usize, &[&str]); 4] = [
    ("id-a", "mug-a", 0.9, 1, &["red lid", "round body"]),
    ("id-b", "mug-b", 0.8, 2, &["blue handle", "star sticker"]),
    ("id-c", "mug-c", 0.7, 3, &["chipped rim", "plain white"]),
    ("id-d", "mug-d", 0.1, 1, &["tall", "green stripe"]),
];

/// Attribute strings and their cosine with the query image.
pub const ATTRIBUTES: [(&str, f64); 9] = [
    ("red lid", 0.6),
    ("round body", 0.4),
    ("blue handle", 0.3),
    ("star sticker", 0.2),
    ("chipped rim", 0.8),
    ("plain white", 0.1),
    ("tall", 0.05),
    ("green stripe", 0.05),
    ("fabricated gloss", 0.1),
];

pub fn reference_label(id: &str) -> String {
    format!("ref-{id}")
}

pub fn description(name: &str) -> String {
    format!("A ceramic mug called {name}.")
}

pub fn encoder() -> MockEncoder {
    let mut enc = MockEncoder::new(DIM, 7)
        .with_fixture(QUERY, vec![1.0, 0.0, 0.0, 0.0])
        .unwrap();
    for (id, name, cos, axis, _) in MUGS {
        enc = enc
            .with_fixture(reference_label(id), with_query_cosine(cos, axis))
            .unwrap()
            .with_fixture(description(name), with_query_cosine(cos, axis))
            .unwrap();
    }
    for (attr, cos) in ATTRIBUTES {
        enc = enc.with_fixture(attr, with_query_cosine(cos, 2)).unwrap();
    }
    enc
}

pub struct World {
    pub db: Database,
    pub encoder: Arc<MockEncoder>,
    pub images: MemoryImageStore,
    pub query: ImagePayload,
}

impl World {
    pub fn new() -> Self {
        let encoder = encoder();
        let db = Database::new(encoder.encoder_id());
        let mut images = MemoryImageStore::new();
        for (id, name, _, _, attrs) in MUGS {
            let label = reference_label(id);
            let payload = png(&label);
            let path = format!("{label}.png");
            let record = ConceptRecord {
                concept_id: id.to_string(),
                name: name.to_string(),
                category: "mug".to_string(),
                description: description(name),
                attributes: attrs.iter().map(|a| a.to_string()).collect(),
                visual_embedding: encoder.encode_image(&payload).unwrap(),
                textual_embedding: encoder.encode_text(&description(name)).unwrap(),
                reference_image: ImageRef {
                    path: path.clone(),
                    sha256: payload.sha256(),
                },
                extra_reference_images: Vec::new(),
                enrolled_at: epoch(),
            };
            db.upsert(record).unwrap();
            images.insert(path, payload);
        }
        Self {
            db,
            encoder: Arc::new(encoder),
            images,
            query: png(QUERY),
        }
    }

    pub fn query_embedding(&self) -> Embedding {
        self.encoder.encode_image(&self.query).unwrap()
    }

    pub fn pipeline(&self, vlm: Arc<MockVlm>, config: PipelineConfig) -> Pipeline {
        Pipeline::new(
            self.encoder.clone(),
            vlm as Arc<dyn Vlm>,
            Arc::new(self.images.clone()),
            config,
        )
        .unwrap()
    }
}

/// Reasoning turn replying `reply` to the query image.
pub fn cot_turn(reply: &str) -> ScriptedTurn {
    ScriptedTurn::new(
        TurnMatcher {
            images: Some(vec![QUERY.to_string()]),
            prompt_contains: Some(COT_MARKER.to_string()),
            prompt_excludes: None,
        },
        reply,
    )
}

/// Reasoning reply in the expected schema: per-letter matched attributes
/// (`None` when empty) and the chosen answer.
pub fn cot_reply(matched: &[(&str, &[&str])], answer: &str) -> String {
    let mut obj = serde_json::Map::new();
    for (letter, attrs) in matched {
        let value = if attrs.is_empty() {
            "None".to_string()
        } else {
            attrs.join(", ")
        };
        obj.insert(letter.to_string(), value.into());
    }
    obj.insert("Reasoning".into(), "Compared the visible traits.".into());
    obj.insert("Answer".into(), answer.into());
    serde_json::Value::Object(obj).to_string()
}

/// Pairwise turn for the candidate `id`: answers by comparing the yes/no
/// log-probabilities.
pub fn pairwise_turn(id: &str, yes: f64, no: f64) -> ScriptedTurn {
    let answer = if yes >= no { "yes" } else { "no" };
    ScriptedTurn::new(
        TurnMatcher {
            images: Some(vec![QUERY.to_string(), reference_label(id)]),
            prompt_contains: Some(PAIRWISE_MARKER.to_string()),
            prompt_excludes: None,
        },
        format!(r#"{{"Reasoning": "Checked both images.", "Answer": "{answer}"}}"#),
    )
    .with_yes_no(yes, no)
}

/// Pairwise turns for the top three candidates; `winner` gets a confident
/// yes, the others a confident no.
pub fn pairwise_turns(winner: &str) -> Vec<ScriptedTurn> {
    ["id-a", "id-b", "id-c"]
        .into_iter()
        .map(|id| {
            if id == winner {
                pairwise_turn(id, -0.1, -2.5)
            } else {
                pairwise_turn(id, -3.0, -0.05)
            }
        })
        .collect()
}

pub fn logprobs(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}
