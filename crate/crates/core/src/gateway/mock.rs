//! Offline backend that answers from the stays embedded in the prompt.
//!
//! Each stay in history and context adds 1 to its place's score, or 2 when a
//! target slot is given and the stay falls on the same weekday within 120
//! minutes of the target start time. Places are ranked by score, ties by
//! ascending id.

use std::collections::BTreeMap;
use std::time::Instant;

use serde_json::{json, Value};

use super::{CompletionBackend, GatewayError, RawResponse};
use crate::mobility::PlaceId;
use crate::prompt::{extract_prompt_data, ExtractedData, PromptText};

pub const MOCK_MODEL_ID: &str = "mock-frequency-v1";

const TIME_WINDOW_MIN: u16 = 120;

/// Ranked `(place, score)` pairs for the extracted prompt data.
pub fn mock_scores(data: &ExtractedData) -> Vec<(PlaceId, u32)> {
    let mut scores: BTreeMap<PlaceId, u32> = BTreeMap::new();
    let stays = data.history.iter().flatten().chain(data.context.iter().flatten());
    for stay in stays {
        let bonus = data.target.is_some_and(|t| {
            t.day_of_week() == stay.day_of_week() && t.start_time().abs_diff(stay.start_time()) <= TIME_WINDOW_MIN
        });
        *scores.entry(stay.place_id()).or_default() += if bonus { 2 } else { 1 };
    }
    let mut ranked: Vec<_> = scores.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

pub fn mock_complete(prompt: &PromptText, k: usize) -> Result<RawResponse, GatewayError> {
    let started = Instant::now();
    let data = extract_prompt_data(&prompt.text)?;
    let ranked = mock_scores(&data);
    let top: Vec<u64> = ranked.iter().take(k).map(|(p, _)| p.0).collect();
    let prediction = if k == 1 {
        top.first().map_or(Value::Null, |&p| json!(p))
    } else {
        json!(top)
    };
    let reason = match ranked.first() {
        Some((place, score)) if data.target.is_some() => format!(
            "Place {place} has the highest visit score ({score}), counting visits near the target time twice."
        ),
        Some((place, score)) => format!("Place {place} is the most visited place in the provided stays ({score} visits)."),
        None => "No stays were provided.".to_string(),
    };
    let text = json!({ "prediction": prediction, "reason": reason }).to_string();
    Ok(RawResponse {
        text,
        model_id: MOCK_MODEL_ID.to_string(),
        latency_ms: started.elapsed().as_millis() as u64,
        from_cache: false,
        attempt_count: 1,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MockBackend;

impl CompletionBackend for MockBackend {
    fn complete(&self, prompt: &PromptText) -> Result<RawResponse, GatewayError> {
        mock_complete(prompt, prompt.k)
    }

    fn model_id(&self) -> &str {
        MOCK_MODEL_ID
    }
}
