//! Turning free-form model output into a validated ranked prediction.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::gateway::RawResponse;
use crate::mobility::PlaceId;
use crate::prompt::PromptText;

const MAX_QUOTED_CHARS: usize = 2000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no JSON object with a \"prediction\" key found")]
    NoObjectFound,
    #[error("\"prediction\" is not an integer or a list of integers: {0}")]
    SchemaMismatch(String),
    #[error("\"prediction\" is empty")]
    EmptyPrediction,
}

impl ParseError {
    pub fn kind(&self) -> &'static str {
        match self {
            ParseError::NoObjectFound => "no_object",
            ParseError::SchemaMismatch(_) => "schema_mismatch",
            ParseError::EmptyPrediction => "empty_prediction",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnostics {
    pub had_duplicates: bool,
    pub was_truncated: bool,
    /// The object only parsed after lenient fixes (trailing commas, quotes).
    pub repair_used: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub places: Vec<PlaceId>,
    pub reason: String,
    pub diagnostics: ParseDiagnostics,
}

impl RankedPrediction {
    /// The response object this prediction would have been parsed from.
    pub fn to_response_json(&self) -> String {
        let prediction = if self.places.len() == 1 {
            Value::from(self.places[0].0)
        } else {
            Value::from(self.places.iter().map(|p| p.0).collect::<Vec<_>>())
        };
        let mut obj = Map::new();
        obj.insert("prediction".into(), prediction);
        obj.insert("reason".into(), Value::from(self.reason.clone()));
        Value::Object(obj).to_string()
    }
}

/// Byte range of the balanced `{...}` starting at `start`, honoring string
/// literals in either quote style.
fn balanced_object(text: &str, start: usize) -> Option<usize> {
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    let mut in_str: Option<u8> = None;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if let Some(q) = in_str {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == q {
                in_str = None;
            }
            continue;
        }
        match b {
            b'"' | b'\'' => in_str = Some(b),
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn strip_trailing_commas(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let chars: Vec<char> = s.chars().collect();
    let mut in_str = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_str {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            continue;
        }
        if c == '"' {
            in_str = true;
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

fn single_to_double_quotes(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut in_double = false;
    let mut in_single = false;
    let mut chars = s.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\\' => {
                // `\'` is only meaningful inside single quotes; JSON wants a bare `'`.
                if in_single && chars.peek() == Some(&'\'') {
                    out.push(chars.next().expect("peeked"));
                } else {
                    out.push(c);
                    if let Some(next) = chars.next() {
                        out.push(next);
                    }
                }
            }
            '"' if in_single => out.push_str("\\\""),
            '"' => {
                in_double = !in_double;
                out.push(c);
            }
            '\'' if !in_double => {
                in_single = !in_single;
                out.push('"');
            }
            _ => out.push(c),
        }
    }
    out
}

/// Strict parse first, then lenient fixes. Returns the value and whether a
/// fix was needed.
fn parse_candidate(candidate: &str) -> Option<(Value, bool)> {
    if let Ok(v) = serde_json::from_str::<Value>(candidate) {
        return Some((v, false));
    }
    let fixed = strip_trailing_commas(candidate);
    if let Ok(v) = serde_json::from_str::<Value>(&fixed) {
        return Some((v, true));
    }
    let fixed = strip_trailing_commas(&single_to_double_quotes(candidate));
    serde_json::from_str::<Value>(&fixed).ok().map(|v| (v, true))
}

/// First top-level object in `text` that carries a `prediction` key.
fn find_prediction_object(text: &str) -> Option<(Map<String, Value>, bool)> {
    let mut pos = 0;
    while let Some(offset) = text[pos..].find('{') {
        let start = pos + offset;
        match balanced_object(text, start) {
            Some(end) => match parse_candidate(&text[start..end]) {
                Some((Value::Object(obj), repaired)) if obj.contains_key("prediction") => {
                    return Some((obj, repaired));
                }
                Some(_) => pos = end,
                None => pos = start + 1,
            },
            None => pos = start + 1,
        }
    }
    None
}

fn as_place(v: &Value) -> Option<PlaceId> {
    v.as_u64().map(PlaceId)
}

/// Parses model text into at most `k` distinct places plus the reason.
///
/// Scalar predictions become one-element lists, repeated ids keep their
/// first occurrence, and lists longer than `k` are cut. Short lists are kept
/// as they are.
pub fn parse_text(text: &str, k: usize) -> Result<RankedPrediction, ParseError> {
    let (obj, repair_used) = find_prediction_object(text).ok_or(ParseError::NoObjectFound)?;
    let raw_places: Vec<PlaceId> = match &obj["prediction"] {
        Value::Array(items) => items
            .iter()
            .map(|v| as_place(v).ok_or_else(|| ParseError::SchemaMismatch(v.to_string())))
            .collect::<Result<_, _>>()?,
        v => vec![as_place(v).ok_or_else(|| ParseError::SchemaMismatch(v.to_string()))?],
    };
    if raw_places.is_empty() {
        return Err(ParseError::EmptyPrediction);
    }
    let mut places = Vec::with_capacity(raw_places.len());
    for p in &raw_places {
        if !places.contains(p) {
            places.push(*p);
        }
    }
    let had_duplicates = places.len() < raw_places.len();
    let was_truncated = places.len() > k;
    places.truncate(k);
    let reason = match obj.get("reason") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
    };
    Ok(RankedPrediction {
        places,
        reason,
        diagnostics: ParseDiagnostics {
            had_duplicates,
            was_truncated,
            repair_used,
        },
    })
}

pub fn parse_prediction(raw: &RawResponse, k: usize) -> Result<RankedPrediction, ParseError> {
    parse_text(&raw.text, k)
}

/// Appends a corrective stanza quoting the unreadable output and restating
/// the required answer format.
pub fn repair_prompt(original: &PromptText, bad_output: &str) -> PromptText {
    let mut quoted: String = bad_output.chars().take(MAX_QUOTED_CHARS).collect();
    if quoted.len() < bad_output.len() {
        quoted.push_str(" ...");
    }
    let quoted = quoted
        .lines()
        .map(|l| format!("> {l}"))
        .collect::<Vec<_>>()
        .join("\n");
    let shape = if original.k == 1 {
        "a single integer place ID".to_string()
    } else {
        format!("a list of {} distinct integer place IDs", original.k)
    };
    let text = format!(
        "{}\n\nYour previous answer could not be read:\n{}\n\
         Answer again with only a single JSON object of the form \
         {{\"prediction\": ..., \"reason\": \"...\"}}, where \"prediction\" is {} and \"reason\" is a string. \
         Do not add any other text.",
        original.text, quoted, shape
    );
    PromptText::new(&format!("{}+repair", original.template_id), text, original.k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(p: &RankedPrediction) -> Vec<u64> {
        p.places.iter().map(|p| p.0).collect()
    }

    #[test]
    fn duplicated_case_study_list() {
        let text = r#"{"prediction": [445, 9, 444, 335, 448, 447, 446, 1, 444, 443], "reason": "familiar places"}"#;
        let p = parse_text(text, 10).unwrap();
        assert_eq!(ids(&p), vec![445, 9, 444, 335, 448, 447, 446, 1, 443]);
        assert!(p.diagnostics.had_duplicates);
        assert!(!p.diagnostics.was_truncated);
        assert_eq!(p.reason, "familiar places");
    }

    #[test]
    fn scalar_prediction() {
        let p = parse_text(r#"{"prediction": 9, "reason": "night"}"#, 1).unwrap();
        assert_eq!(ids(&p), vec![9]);
    }

    #[test]
    fn prose_wrapper_short_list() {
        let p = parse_text(r#"Sure! Here is my answer: {"prediction": [3,1,2]}"#, 10).unwrap();
        assert_eq!(ids(&p), vec![3, 1, 2]);
        assert!(!p.diagnostics.was_truncated);
        assert_eq!(p.reason, "");
    }

    #[test]
    fn truncation_and_lenient_fixes() {
        let p = parse_text("{'prediction': [5, 6, 7,], 'reason': 'it\\'s home',}", 2).unwrap();
        assert_eq!(ids(&p), vec![5, 6]);
        assert!(p.diagnostics.was_truncated && p.diagnostics.repair_used);
    }

    #[test]
    fn skips_objects_without_prediction() {
        let text = r#"{"note": "x"} then {"prediction": [4]} and {"prediction": [5]}"#;
        assert_eq!(ids(&parse_text(text, 10).unwrap()), vec![4]);
    }

    #[test]
    fn failure_kinds() {
        assert_eq!(parse_text("places: 3, 1", 10), Err(ParseError::NoObjectFound));
        assert_eq!(parse_text("", 10), Err(ParseError::NoObjectFound));
        assert_eq!(parse_text(r#"{"prediction": []}"#, 10), Err(ParseError::EmptyPrediction));
        assert!(matches!(
            parse_text(r#"{"prediction": ["place_3"]}"#, 10),
            Err(ParseError::SchemaMismatch(_))
        ));
        assert!(matches!(parse_text(r#"{"prediction": -1}"#, 1), Err(ParseError::SchemaMismatch(_))));
    }

    #[test]
    fn repair_prompt_quotes_bad_output() {
        let original = PromptText::new("main_v1", "PROMPT".into(), 10);
        let repaired = repair_prompt(&original, "places: 3, 1");
        assert!(repaired.text.starts_with("PROMPT\n\n"));
        assert!(repaired.text.contains("> places: 3, 1"));
        assert!(repaired.text.contains("\"prediction\""));
        assert!(repaired.text.contains("a list of 10 distinct integer place IDs"));
        assert_eq!(repaired.template_id, "main_v1+repair");
        assert_ne!(repaired.prompt_hash, original.prompt_hash);
    }

    proptest! {
        #[test]
        fn serialization_round_trips(raw in proptest::collection::vec(0u64..50, 1..15), reason in "[ -~]{0,40}") {
            let mut places = Vec::new();
            for p in raw {
                if !places.contains(&PlaceId(p)) {
                    places.push(PlaceId(p));
                }
            }
            let pred = RankedPrediction { places, reason, diagnostics: ParseDiagnostics::default() };
            let k = pred.places.len();
            prop_assert_eq!(parse_text(&pred.to_response_json(), k).unwrap(), pred);
        }

        #[test]
        fn dedup_keeps_first_occurrence_order(raw in proptest::collection::vec(0u64..8, 1..30)) {
            let json = format!("{{\"prediction\": {:?}}}", raw);
            let p = parse_text(&json, usize::MAX).unwrap();
            let got = ids(&p);
            let mut expected = Vec::new();
            for x in &raw {
                if !expected.contains(x) {
                    expected.push(*x);
                }
            }
            prop_assert_eq!(got, expected);
        }
    }
}
