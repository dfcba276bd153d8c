//! Enrollment through the scripted chat model and the privileged path.

use std::sync::Arc;

use chrono::{TimeZone, Utc};
use r2p_core::db::Database;
use r2p_core::enrollment::{
    enroll_concept, enroll_with_privileged_attributes, EnrollContext, EnrollmentError,
};
use r2p_core::gateway::{Encoder, MockEncoder, MockVlm, ScriptedTurn, TurnMatcher};
use r2p_core::image::{labeled_png, ImageError, ImageFile, ImageHook, ImagePayload};

const REPLY: &str = r#"{"general": "A white mug with a red lid.", "category": "cup", "distinct features": ["red lid", "round body", "chipped rim"]}"#;

fn image(label: &str) -> ImageFile {
    ImageFile::from_bytes(format!("{label}.png"), labeled_png(label)).unwrap()
}

fn vlm(replies: &[&str]) -> MockVlm {
    // First reply answers the plain prompt, the second the re-ask.
    let mut turns = vec![ScriptedTurn::new(
        TurnMatcher {
            prompt_excludes: Some("IMPORTANT: Output only".into()),
            ..TurnMatcher::default()
        },
        replies[0],
    )];
    if let Some(second) = replies.get(1) {
        turns.push(ScriptedTurn::new(
            TurnMatcher {
                prompt_contains: Some("IMPORTANT: Output only".into()),
                ..TurnMatcher::default()
            },
            *second,
        ));
    }
    MockVlm::new(turns)
}

fn ctx() -> EnrollContext {
    EnrollContext::deterministic(Utc.with_ymd_and_hms(2024, 3, 1, 9, 0, 0).unwrap())
}

fn dump(db: &Database) -> String {
    db.snapshot()
        .records()
        .map(|r| serde_json::to_string(r).unwrap())
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn scripted_enrollment_stores_a_full_record() {
    let db = Database::new("");
    let enc = MockEncoder::new(16, 3);
    let model = vlm(&[REPLY]);
    let r = enroll_concept(&image("mug"), "<sks>", "mug", &db, &model, &enc, &ctx()).unwrap();
    assert_eq!(r.attributes, ["red lid", "round body", "chipped rim"]);
    assert_eq!(r.description, "A white mug with a red lid.");
    assert_eq!(r.category, "mug", "the user's category wins over the model's");
    assert!((r.visual_embedding.norm() - 1.0).abs() < 1e-12);
    assert!((r.textual_embedding.norm() - 1.0).abs() < 1e-12);
    // text embedding comes from the description, not the attributes
    assert_eq!(r.textual_embedding, enc.encode_text(&r.description).unwrap());
    assert_eq!(model.call_count(), 1);
    assert_eq!(db.snapshot().encoder_id(), enc.encoder_id());
    assert_eq!(db.snapshot().len(), 1);
    let req = &model.requests()[0];
    assert_eq!(req.image_labels, ["mug"]);
    assert!(req.prompt_text.contains("identified by the concept-identifier <sks>"));
}

#[test]
fn fenced_reply_gives_the_same_record() {
    let plain = Database::new("");
    let fenced = Database::new("");
    let enc = MockEncoder::new(16, 3);
    let a = enroll_concept(&image("mug"), "<sks>", "mug", &plain, &vlm(&[REPLY]), &enc, &ctx()).unwrap();
    let wrapped = format!("Here you go:\n```json\n{REPLY}\n```");
    let b = enroll_concept(&image("mug"), "<sks>", "mug", &fenced, &vlm(&[&wrapped]), &enc, &ctx()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn prose_twice_fails_and_leaves_the_database_untouched() {
    let db = Database::new("");
    let enc = MockEncoder::new(16, 3);
    enroll_concept(&image("first"), "first", "mug", &db, &vlm(&[REPLY]), &enc, &ctx()).unwrap();
    let before = dump(&db);
    let model = vlm(&["It is a nice mug.", "Still a nice mug."]);
    let err = enroll_concept(&image("mug"), "<sks>", "mug", &db, &model, &enc, &ctx()).unwrap_err();
    assert_eq!(err.code(), "ENROLLMENT_PARSE_FAILURE");
    assert_eq!(model.call_count(), 2);
    assert_eq!(dump(&db), before);
}

#[test]
fn reask_recovers_with_two_calls() {
    let db = Database::new("");
    let model = vlm(&["It is a nice mug.", REPLY]);
    let r = enroll_concept(&image("mug"), "<sks>", "mug", &db, &model, &MockEncoder::new(8, 1), &ctx()).unwrap();
    assert_eq!(r.attributes.len(), 3);
    assert_eq!(model.call_count(), 2);
}

#[test]
fn duplicate_names_are_rejected_before_any_call() {
    let db = Database::new("");
    let enc = MockEncoder::new(8, 1);
    enroll_concept(&image("mug"), "<sks>", "mug", &db, &vlm(&[REPLY]), &enc, &ctx()).unwrap();
    let before = dump(&db);
    let model = vlm(&[REPLY]);
    let err = enroll_concept(&image("other"), " <SKS> ", "mug", &db, &model, &enc, &ctx()).unwrap_err();
    assert!(matches!(err, EnrollmentError::DuplicateName { .. }));
    assert_eq!(err.code(), "DUPLICATE_NAME");
    assert_eq!(model.call_count(), 0);
    assert_eq!(dump(&db), before);
}

#[test]
fn encoder_mismatch_is_rejected() {
    let db = Database::new("");
    enroll_concept(&image("a"), "a", "mug", &db, &vlm(&[REPLY]), &MockEncoder::new(8, 1), &ctx()).unwrap();
    let err = enroll_concept(&image("b"), "b", "mug", &db, &vlm(&[REPLY]), &MockEncoder::new(8, 2), &ctx())
        .unwrap_err();
    assert_eq!(err.code(), "ENCODER_MISMATCH");
    assert_eq!(db.snapshot().len(), 1);
}

#[test]
fn long_attribute_lists_are_capped() {
    let feats: Vec<String> = (0..20).map(|i| format!("feature {i}")).collect();
    let reply = serde_json::json!({"general": "g.", "category": "mug", "distinct features": feats}).to_string();
    let db = Database::new("");
    let r = enroll_concept(&image("mug"), "m", "mug", &db, &vlm(&[&reply]), &MockEncoder::new(8, 1), &ctx()).unwrap();
    assert_eq!(r.attributes.len(), 12);
    assert_eq!(r.attributes[11], "feature 11");
}

#[test]
fn re_enrollment_is_reproducible_apart_from_id_and_time() {
    let enc = MockEncoder::new(16, 3);
    let a = enroll_concept(&image("mug"), "<sks>", "mug", &Database::new(""), &vlm(&[REPLY]), &enc, &EnrollContext::new()).unwrap();
    let mut b = enroll_concept(&image("mug"), "<sks>", "mug", &Database::new(""), &vlm(&[REPLY]), &enc, &EnrollContext::new()).unwrap();
    assert_ne!(a.concept_id, b.concept_id);
    b.concept_id = a.concept_id.clone();
    b.enrolled_at = a.enrolled_at;
    assert_eq!(a, b);
}

#[test]
fn privileged_attributes_bypass_the_model() {
    let db = Database::new("");
    let enc = MockEncoder::new(8, 1);
    let attrs: Vec<String> = ["color", "shape", "pattern", "printed text"].map(String::from).to_vec();
    let r = enroll_with_privileged_attributes(&image("mug"), "<sks>", "mug", &attrs, "A mug.", &db, &enc, &ctx()).unwrap();
    assert_eq!(r.attributes, attrs);
    assert_eq!(r.description, "A mug.");

    let single = enroll_with_privileged_attributes(&image("cup"), "cup", "mug", &["blue".into()], "A cup.", &db, &enc, &ctx()).unwrap();
    assert_eq!(single.attributes, ["blue"]);

    let err = enroll_with_privileged_attributes(&image("x"), "x", "mug", &[], "A cup.", &db, &enc, &ctx()).unwrap_err();
    assert_eq!(err.code(), "INVALID_INPUT");
    let err = enroll_with_privileged_attributes(&image("x"), "x", "mug", &["a".into()], " ", &db, &enc, &ctx()).unwrap_err();
    assert_eq!(err.code(), "INVALID_INPUT");
    assert_eq!(db.snapshot().len(), 2);
}

struct Relabel;

impl ImageHook for Relabel {
    fn apply(&self, _image: &ImagePayload) -> Result<ImagePayload, ImageError> {
        ImagePayload::new(labeled_png("cropped"))
    }
}

#[test]
fn crop_hook_changes_only_the_encoder_input() {
    let db = Database::new("");
    let enc = MockEncoder::new(8, 1);
    let model = vlm(&[REPLY]);
    let ctx = ctx().with_hook(Arc::new(Relabel));
    let r = enroll_concept(&image("scene"), "<sks>", "mug", &db, &model, &enc, &ctx).unwrap();
    assert_eq!(r.visual_embedding, enc.embed_label("cropped"));
    assert_eq!(model.requests()[0].image_labels, ["scene"]);
    assert_eq!(r.reference_image.sha256, image("scene").payload.sha256());
}
