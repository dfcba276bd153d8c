//! Malformed reasoning replies that the parser must recover to the
//! canonical verdict: option A with attributes for A only.

#![allow(dead_code)]

pub const CANONICAL_COT: &str =
    r#"{"A": "red lid, round body", "B": "None", "C": "None", "Reasoning": "The lid is red.", "Answer": "A"}"#;

/// Replies that must all recover to the canonical verdict.
pub fn recoverable_corpus() -> Vec<(&'static str, String)> {
    let c = CANONICAL_COT;
    vec![
        ("json fence", format!("```json\n{c}\n```")),
        ("bare fence", format!("```\n{c}\n```")),
        ("leading prose", format!("Here is my analysis:\n{c}")),
        ("trailing prose", format!("{c}\nLet me know if you need more.")),
        ("prose both sides", format!("Sure! {c} Hope this helps.")),
        (
            "lowercase keys",
            r#"{"a": "red lid, round body", "b": "none", "c": "none", "reasoning": "The lid is red.", "answer": "A"}"#.into(),
        ),
        (
            "uppercase keys",
            r#"{"A": "red lid, round body", "B": "None", "C": "None", "REASONING": "The lid is red.", "ANSWER": "A"}"#.into(),
        ),
        (
            "trailing commas",
            r#"{"A": "red lid, round body", "B": "None", "C": "None", "Reasoning": "The lid is red.", "Answer": "A",}"#.into(),
        ),
        (
            "list-valued attributes",
            r#"{"A": ["red lid", "round body"], "B": [], "C": ["None"], "Reasoning": "The lid is red.", "Answer": "A"}"#.into(),
        ),
        (
            "bracketed string attributes",
            r#"{"A": "[red lid, round body]", "B": "[]", "C": "N/A", "Reasoning": "The lid is red.", "Answer": "A"}"#.into(),
        ),
        (
            "lowercase answer",
            r#"{"A": "red lid, round body", "B": "None", "C": "None", "Reasoning": "The lid is red.", "Answer": "a"}"#.into(),
        ),
        (
            "answer with punctuation",
            r#"{"A": "red lid, round body", "B": "None", "C": "None", "Reasoning": "The lid is red.", "Answer": "A."}"#.into(),
        ),
        (
            "answer with option word",
            r#"{"A": "red lid, round body", "B": "None", "C": "None", "Reasoning": "The lid is red.", "Answer": "Option A"}"#.into(),
        ),
        (
            "answer with name",
            r#"{"A": "red lid, round body", "B": "None", "C": "None", "Reasoning": "The lid is red.", "Answer": "A) <sks>"}"#.into(),
        ),
        (
            "pretty printed in fence with prose",
            format!(
                "I compared each option.\n```json\n{}\n```\nDone.",
                serde_json::to_string_pretty(&serde_json::from_str::<serde_json::Value>(c).unwrap()).unwrap()
            ),
        ),
        (
            "second object ignored",
            r#"{"A": "red lid, round body", "B": "None", "C": "None", "Reasoning": "The lid is red.", "Answer": "A"} and {"Answer": "B"}"#.into(),
        ),
        ("surrounding whitespace", format!("\n\n   {c}   \n")),
        ("markdown heading", format!("**Result**\n\n{c}")),
        (
            "null entries",
            r#"{"A": "red lid, round body", "B": null, "C": "", "Reasoning": "The lid is red.", "Answer": "A"}"#.into(),
        ),
        (
            "missing option keys",
            r#"{"A": "red lid, round body", "Reasoning": "The lid is red.", "Answer": "A"}"#.into(),
        ),
    ]
}
