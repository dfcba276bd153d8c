//! Scripted end-to-end scenarios for the inference pipeline: verification
//! gating, component toggles, fallbacks and determinism.

mod common;

use std::sync::Arc;

use common::*;
use r2p_core::gateway::{MockVlm, ScriptedTurn, TurnMatcher};
use r2p_core::inference::{
    attribute_verify, InferenceTrace, PipelineConfig, Preset, RecognitionMode, Task, Verification,
};

fn run(turns: Vec<ScriptedTurn>, config: PipelineConfig) -> (InferenceTrace, Arc<MockVlm>) {
    let world = World::new();
    let vlm = Arc::new(MockVlm::new(turns));
    let pipeline = world.pipeline(vlm.clone(), config);
    let trace = pipeline
        .infer_concept(&world.query, &world.db.snapshot())
        .unwrap();
    assert!(
        trace.candidate_set.ids().any(|id| id == trace.final_concept),
        "final concept must come from the candidate set"
    );
    assert_eq!(trace.vlm_calls as usize, vlm.call_count());
    (trace, vlm)
}

fn with_verification(verification: Verification) -> PipelineConfig {
    PipelineConfig {
        verification,
        ..PipelineConfig::default()
    }
}

fn agreeing_reply() -> String {
    cot_reply(
        &[("A", &["red lid", "round body"]), ("B", &["star sticker"]), ("C", &[])],
        "A",
    )
}

fn disagreeing_reply() -> String {
    cot_reply(
        &[("A", &["round body"]), ("B", &[]), ("C", &["chipped rim"])],
        "A",
    )
}

#[test]
fn retrieval_orders_the_fixture_as_designed() {
    let (trace, _) = run(vec![], PipelineConfig::preset(Preset::RetrievalOnly));
    let ids: Vec<&str> = trace.candidate_set.ids().collect();
    assert_eq!(ids, ["id-a", "id-b", "id-c"]);
    let top = trace.candidate_set.top().unwrap();
    assert!((top.s_vv - 0.9).abs() < 1e-12);
    assert!((top.fused - 0.9).abs() < 1e-12);
}

#[test]
fn attribute_agreement_skips_pairwise() {
    let (trace, _) = run(vec![cot_turn(&agreeing_reply())], PipelineConfig::default());
    assert_eq!(trace.c_tilde, "id-a");
    assert_eq!(trace.c_tilde_a.as_deref(), Some("id-a"));
    assert_eq!(trace.verification_passed, Some(true));
    assert!(trace.pairwise_probs.is_none());
    assert_eq!(trace.final_concept, "id-a");
    assert_eq!(trace.vlm_calls, 1);
    let scores = trace.attribute_scores.as_ref().unwrap();
    assert!((scores["id-a"].unwrap() - 0.5).abs() < 1e-12);
    assert!((scores["id-b"].unwrap() - 0.2).abs() < 1e-12);
    assert_eq!(scores["id-c"], None);
}

#[test]
fn attribute_disagreement_runs_pairwise_over_all_candidates() {
    let mut turns = vec![cot_turn(&disagreeing_reply())];
    turns.extend(pairwise_turns("id-c"));
    let (trace, vlm) = run(turns, PipelineConfig::default());
    assert_eq!(trace.c_tilde, "id-a");
    assert_eq!(trace.c_tilde_a.as_deref(), Some("id-c"));
    assert_eq!(trace.verification_passed, Some(false));
    assert_eq!(trace.vlm_calls, 1 + 3);
    assert_eq!(trace.pairwise_probs.as_ref().unwrap().len(), 3);
    assert_eq!(trace.final_concept, "id-c");
    for req in vlm.requests().iter().skip(1) {
        assert_eq!(req.image_labels[0], QUERY, "query image goes first");
        assert!(req.want_logprobs);
    }
}

#[test]
fn empty_matches_everywhere_fail_verification() {
    let reply = cot_reply(&[("A", &[]), ("B", &[]), ("C", &[])], "B");
    let mut turns = vec![cot_turn(&reply)];
    turns.extend(pairwise_turns("id-b"));
    let (trace, _) = run(turns, PipelineConfig::default());
    assert_eq!(trace.c_tilde, "id-b");
    assert_eq!(trace.c_tilde_a, None);
    assert_eq!(trace.verification_passed, Some(false));
    assert!(trace.attribute_scores.as_ref().unwrap().values().all(Option::is_none));
    assert_eq!(trace.vlm_calls, 4);
    assert_eq!(trace.final_concept, "id-b");
}

#[test]
fn unusable_reasoning_falls_back_to_rank_one_then_pairwise() {
    let mut turns = vec![cot_turn("I think it is probably the first mug.")];
    turns.extend(pairwise_turns("id-b"));
    let (trace, vlm) = run(turns, PipelineConfig::default());
    assert!(trace.flags.cot_fallback);
    assert!(trace.cot_verdict.is_none());
    assert_eq!(trace.c_tilde, "id-a");
    assert_eq!(trace.verification_passed, Some(false));
    // one re-ask, then three comparisons
    assert_eq!(trace.vlm_calls, 2 + 3);
    assert!(vlm.requests()[1].prompt_text.ends_with("with no other text."));
    assert_eq!(trace.final_concept, "id-b");
}

#[test]
fn reask_recovers_a_valid_reply() {
    let bad = ScriptedTurn::new(
        TurnMatcher {
            images: Some(vec![QUERY.to_string()]),
            prompt_contains: Some(COT_MARKER.to_string()),
            prompt_excludes: Some("IMPORTANT: Output only".to_string()),
        },
        "Option A looks right.",
    );
    let good = ScriptedTurn::new(
        TurnMatcher {
            images: Some(vec![QUERY.to_string()]),
            prompt_contains: Some("IMPORTANT: Output only".to_string()),
            prompt_excludes: None,
        },
        agreeing_reply(),
    );
    let (trace, _) = run(vec![bad, good], PipelineConfig::default());
    assert!(!trace.flags.cot_fallback);
    assert_eq!(trace.verification_passed, Some(true));
    assert_eq!(trace.vlm_calls, 2);
}

#[test]
fn abstention_answer_triggers_pairwise() {
    let reply = cot_reply(&[("A", &["red lid"]), ("B", &[]), ("C", &[])], "I am not sure");
    let mut turns = vec![cot_turn(&reply)];
    turns.extend(pairwise_turns("id-b"));
    let (trace, vlm) = run(turns, with_verification(Verification::Abstention));
    assert!(vlm.requests()[0].prompt_text.contains("I am not sure"));
    assert!(trace.flags.uncertain);
    assert_eq!(trace.verification_passed, Some(false));
    assert_eq!(trace.vlm_calls, 4);
    assert_eq!(trace.final_concept, "id-b");
    assert!(trace.attribute_scores.is_none());
}

#[test]
fn abstention_with_confident_answer_passes() {
    let reply = cot_reply(&[("A", &[]), ("B", &["blue handle"]), ("C", &[])], "B");
    let (trace, _) = run(vec![cot_turn(&reply)], with_verification(Verification::Abstention));
    assert_eq!(trace.verification_passed, Some(true));
    assert_eq!(trace.final_concept, "id-b");
    assert_eq!(trace.vlm_calls, 1);
}

#[test]
fn logits_idk_winning_triggers_pairwise() {
    let turn = cot_turn(&agreeing_reply()).with_logprobs(logprobs(&[("A", -1.2), ("D", -0.4)]));
    let mut turns = vec![turn];
    turns.extend(pairwise_turns("id-c"));
    let (trace, vlm) = run(turns, with_verification(Verification::LogitsBased));
    assert!(vlm.requests()[0].want_logprobs);
    assert!(vlm.requests()[0].prompt_text.contains("I don't know"));
    assert_eq!(trace.c_tilde, "id-a");
    assert_eq!(trace.verification_passed, Some(false));
    assert_eq!(trace.vlm_calls, 4);
    assert_eq!(trace.final_concept, "id-c");
}

#[test]
fn logits_confident_letter_passes() {
    let turn = cot_turn(&agreeing_reply()).with_logprobs(logprobs(&[("A", -0.05), ("D", -3.0)]));
    let (trace, _) = run(vec![turn], with_verification(Verification::LogitsBased));
    assert_eq!(trace.verification_passed, Some(true));
    assert_eq!(trace.vlm_calls, 1);
    assert_eq!(trace.final_concept, "id-a");
}

#[test]
fn logits_margin_widens_the_trigger() {
    let turn = cot_turn(&agreeing_reply()).with_logprobs(logprobs(&[("A", -0.5), ("D", -1.0)]));
    let mut turns = vec![turn];
    turns.extend(pairwise_turns("id-a"));
    let config = PipelineConfig {
        logits_margin: 1.0,
        ..with_verification(Verification::LogitsBased)
    };
    let (trace, _) = run(turns, config);
    assert_eq!(trace.verification_passed, Some(false));
    assert_eq!(trace.vlm_calls, 4);
}

#[test]
fn pairwise_always_refines_even_when_reasoning_is_sure() {
    let mut turns = vec![cot_turn(&agreeing_reply())];
    turns.extend(pairwise_turns("id-b"));
    let (trace, _) = run(turns, with_verification(Verification::PairwiseAlways));
    assert_eq!(trace.verification_passed, None);
    assert_eq!(trace.vlm_calls, 4);
    assert_eq!(trace.final_concept, "id-b");
}

#[test]
fn verification_none_accepts_reasoning() {
    let reply = cot_reply(&[("A", &[]), ("B", &[]), ("C", &["chipped rim"])], "C");
    let (trace, _) = run(vec![cot_turn(&reply)], with_verification(Verification::None));
    assert_eq!(trace.verification_passed, None);
    assert!(trace.pairwise_probs.is_none());
    assert_eq!(trace.final_concept, "id-c");
    assert_eq!(trace.vlm_calls, 1);
}

#[test]
fn failed_verification_without_pairwise_keeps_reasoning_choice() {
    let config = PipelineConfig {
        enable_pairwise: false,
        ..PipelineConfig::default()
    };
    let (trace, _) = run(vec![cot_turn(&disagreeing_reply())], config);
    assert_eq!(trace.verification_passed, Some(false));
    assert!(trace.pairwise_probs.is_none());
    assert_eq!(trace.final_concept, "id-a");
    assert_eq!(trace.vlm_calls, 1);
}

#[test]
fn all_no_answers_fall_back_to_retrieval_order() {
    let mut turns = vec![cot_turn(&disagreeing_reply())];
    for id in ["id-a", "id-b", "id-c"] {
        turns.push(pairwise_turn(id, -2.0, -0.2));
    }
    let (trace, _) = run(turns, PipelineConfig::default());
    assert!(trace.flags.pairwise_all_no);
    assert_eq!(trace.final_concept, "id-a");
}

#[test]
fn unreadable_pairwise_reply_scores_zero() {
    let mut turns = vec![cot_turn(&disagreeing_reply())];
    turns.push(ScriptedTurn::new(
        TurnMatcher {
            images: Some(vec![QUERY.to_string(), reference_label("id-a")]),
            ..TurnMatcher::default()
        },
        "The images are hard to compare.",
    ));
    turns.push(pairwise_turn("id-b", -0.7, -0.9));
    turns.push(pairwise_turn("id-c", -2.0, -0.2));
    let (trace, _) = run(turns, PipelineConfig::default());
    assert_eq!(trace.flags.pairwise_unparseable, ["id-a"]);
    assert_eq!(trace.pairwise_probs.as_ref().unwrap()["id-a"], 0.0);
    assert_eq!(trace.final_concept, "id-b");
}

#[test]
fn hallucinated_attribute_is_corrected_by_pairwise() {
    // The reasoning step picks B on the strength of an attribute that B
    // does not have; the attribute scores favour A, and the pairwise
    // comparisons confirm A.
    let reply = cot_reply(
        &[
            ("A", &["red lid", "round body"]),
            ("B", &["fabricated gloss", "blue handle"]),
            ("C", &[]),
        ],
        "B",
    );
    let mut turns = vec![cot_turn(&reply)];
    turns.extend(pairwise_turns("id-a"));
    let (trace, _) = run(turns, PipelineConfig::default());
    assert_eq!(trace.c_tilde, "id-b");
    assert_eq!(trace.c_tilde_a.as_deref(), Some("id-a"));
    assert_eq!(trace.verification_passed, Some(false));
    assert_eq!(trace.final_concept, "id-a");
    let probs = trace.pairwise_probs.unwrap();
    assert!(probs["id-a"] > probs["id-b"] && probs["id-a"] > probs["id-c"]);
}

#[test]
fn component_presets_produce_distinct_traces() {
    // retrieval only: no model calls, rank 1 wins
    let (t, _) = run(vec![], PipelineConfig::preset(Preset::RetrievalOnly));
    assert_eq!((t.vlm_calls, t.final_concept.as_str()), (0, "id-a"));
    assert!(t.cot_verdict.is_none() && t.pairwise_probs.is_none() && t.verification_passed.is_none());

    // reasoning only: one call, reasoning choice kept
    let reply = cot_reply(&[("A", &[]), ("B", &["blue handle"]), ("C", &[])], "B");
    let (t, _) = run(vec![cot_turn(&reply)], PipelineConfig::preset(Preset::CotOnly));
    assert_eq!((t.vlm_calls, t.final_concept.as_str()), (1, "id-b"));
    assert!(t.cot_verdict.is_some() && t.pairwise_probs.is_none() && t.attribute_scores.is_none());

    // pairwise only: K calls, no reasoning
    let (t, _) = run(pairwise_turns("id-c"), PipelineConfig::preset(Preset::PairwiseOnly));
    assert_eq!((t.vlm_calls, t.final_concept.as_str()), (3, "id-c"));
    assert!(t.cot_verdict.is_none() && t.pairwise_probs.is_some());

    // full, verification failing: reasoning + attribute check + pairwise
    let mut turns = vec![cot_turn(&disagreeing_reply())];
    turns.extend(pairwise_turns("id-c"));
    let (t, _) = run(turns, PipelineConfig::preset(Preset::Full));
    assert_eq!((t.vlm_calls, t.final_concept.as_str()), (4, "id-c"));
    assert!(t.cot_verdict.is_some() && t.attribute_scores.is_some() && t.pairwise_probs.is_some());
}

#[test]
fn no_fingerprints_preset_hides_attributes_from_prompts() {
    let reply = cot_reply(&[("A", &[]), ("B", &[]), ("C", &[])], "A");
    let mut turns = vec![cot_turn(&reply)];
    turns.extend(pairwise_turns("id-a"));
    let (t, vlm) = run(turns, PipelineConfig::preset(Preset::NoFingerprints));
    assert_eq!(t.vlm_calls, 4);
    for req in vlm.requests() {
        assert!(!req.prompt_text.contains("red lid"), "attributes leaked into a prompt");
    }
}

#[test]
fn sequential_and_parallel_pairwise_agree() {
    let turns = || {
        let mut t = vec![cot_turn(&disagreeing_reply())];
        t.extend(pairwise_turns("id-b"));
        t
    };
    let (parallel, _) = run(turns(), PipelineConfig::default());
    let (sequential, _) = run(
        turns(),
        PipelineConfig {
            parallel_pairwise: false,
            ..PipelineConfig::default()
        },
    );
    assert_eq!(parallel, sequential);
}

#[test]
fn repeated_inference_is_deterministic() {
    let world = World::new();
    let mut turns = vec![cot_turn(&disagreeing_reply())];
    turns.extend(pairwise_turns("id-c"));
    let pipeline = world.pipeline(Arc::new(MockVlm::new(turns)), PipelineConfig::default());
    let snap = world.db.snapshot();
    let first = pipeline.infer_concept(&world.query, &snap).unwrap();
    for _ in 0..5 {
        let again = pipeline.infer_concept(&world.query, &snap).unwrap();
        assert_eq!(
            serde_json::to_string(&again).unwrap(),
            serde_json::to_string(&first).unwrap()
        );
    }
}

#[test]
fn attribute_mean_over_hand_set_cosines() {
    let world = World::new();
    let matched = vec![
        ("id-a".to_string(), vec!["red lid".to_string(), "round body".to_string()]),
        ("id-b".to_string(), vec![]),
    ];
    let check = attribute_verify(&world.query_embedding(), &matched, world.encoder.as_ref(), "{attribute}")
        .unwrap();
    assert!((check.scores[0].1.unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(check.scores[1].1, None);
    assert_eq!(check.c_tilde_a.as_deref(), Some("id-a"));
}

#[test]
fn recognition_answers_follow_the_resolved_concept() {
    let world = World::new();
    let turns = vec![cot_turn(&agreeing_reply())];
    let pipeline = world.pipeline(Arc::new(MockVlm::new(turns)), PipelineConfig::default());
    let snap = world.db.snapshot();
    let yes = pipeline
        .answer_query(&world.query, &Task::Recognition { target: "mug-a".into() }, &snap)
        .unwrap();
    assert_eq!((yes.text.as_str(), yes.concept_name.as_str()), ("yes", "mug-a"));
    let no = pipeline
        .answer_query(&world.query, &Task::Recognition { target: "mug-c".into() }, &snap)
        .unwrap();
    assert_eq!(no.text, "no");
    let err = pipeline
        .answer_query(&world.query, &Task::Recognition { target: "kettle".into() }, &snap)
        .unwrap_err();
    assert!(matches!(err, r2p_core::inference::InferenceError::UnknownTargetConcept(_)));
}

#[test]
fn direct_pairwise_thresholds_the_target_probability() {
    let world = World::new();
    let turns = vec![pairwise_turn("id-c", -0.3, -1.5), pairwise_turn("id-b", -1.5, -0.3)];
    let config = PipelineConfig {
        recognition_mode: RecognitionMode::DirectPairwise,
        ..PipelineConfig::default()
    };
    let vlm = Arc::new(MockVlm::new(turns));
    let pipeline = world.pipeline(vlm.clone(), config);
    let snap = world.db.snapshot();
    let yes = pipeline
        .answer_query(&world.query, &Task::Recognition { target: "mug-c".into() }, &snap)
        .unwrap();
    assert_eq!(yes.text, "yes");
    assert_eq!(yes.trace.vlm_calls, 1);
    assert!((yes.trace.candidate_set.entries[0].s_vv - 0.7).abs() < 1e-12);
    let no = pipeline
        .answer_query(&world.query, &Task::Recognition { target: "mug-b".into() }, &snap)
        .unwrap();
    assert_eq!(no.text, "no");
    assert_eq!(vlm.call_count(), 2);
}

#[test]
fn caption_names_the_resolved_concept() {
    let world = World::new();
    let caption = ScriptedTurn::new(
        TurnMatcher {
            prompt_contains: Some("Describe the image".to_string()),
            ..TurnMatcher::default()
        },
        "A photo of mug-a on a desk.",
    );
    let turns = vec![cot_turn(&agreeing_reply()), caption];
    let vlm = Arc::new(MockVlm::new(turns));
    let pipeline = world.pipeline(vlm.clone(), PipelineConfig::default());
    let answer = pipeline
        .answer_query(&world.query, &Task::Caption, &world.db.snapshot())
        .unwrap();
    assert_eq!(answer.text, "A photo of mug-a on a desk.");
    assert_eq!(answer.trace.vlm_calls, 2);
    assert!(vlm.requests()[1].prompt_text.contains("mug-a"));
}
