//! Completion backends: an OpenAI-compatible chat-completions client with
//! caching, retries and rate limiting, and a deterministic offline mock.

mod cache;
mod http;
mod limiter;
mod mock;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{ExtractError, PromptText};

pub use cache::{cache_key, ResponseCache};
pub use http::{backoff_delay, HttpBackend};
pub use limiter::{InFlightLimiter, TokenBucket};
pub use mock::{mock_complete, mock_scores, MockBackend, MOCK_MODEL_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Base URL; requests go to `{endpoint_url}/chat/completions`.
    pub endpoint_url: String,
    pub model_id: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_s: f64,
    pub max_in_flight: usize,
    pub cache_dir: Option<PathBuf>,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    /// Requests per second across all workers; `None` disables the bucket.
    pub rate_limit_rps: Option<f64>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "https://api.openai.com/v1".into(),
            model_id: "gpt-3.5-turbo-0613".into(),
            temperature: 0.0,
            max_retries: 5,
            timeout_s: 60.0,
            max_in_flight: 4,
            cache_dir: None,
            api_key_env: "OPENAI_API_KEY".into(),
            backoff_base_ms: 500,
            backoff_max_ms: 30_000,
            rate_limit_rps: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidConfig(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::InvalidConfig("max_in_flight must be at least 1".into()));
        }
        if !(self.timeout_s > 0.0) {
            return Err(GatewayError::InvalidConfig("timeout_s must be positive".into()));
        }
        if matches!(self.rate_limit_rps, Some(r) if !(r > 0.0)) {
            return Err(GatewayError::InvalidConfig("rate_limit_rps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResponse {
    pub text: String,
    pub model_id: String,
    pub latency_ms: u64,
    pub from_cache: bool,
    /// Network attempts made; 0 for cache hits.
    pub attempt_count: u32,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("authentication rejected (HTTP {status}): {body}")]
    Auth { status: u16, body: String },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport error after {attempts} attempts: {detail}")]
    Transport { attempts: u32, detail: String },
    #[error("model returned no usable content: {0}")]
    ContentRefusal(String),
    #[error("prompt could not be read by the mock backend: {0}")]
    ExtractionFailed(#[from] ExtractError),
    #[error("cache error: {0}")]
    Cache(#[from] std::io::Error),
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
}

impl GatewayError {
    /// Errors that make every further request pointless.
    pub fn is_fatal(&self) -> bool {
        matches!(self, GatewayError::Auth { .. } | GatewayError::InvalidConfig(_))
    }
}

/// Request counters for run summaries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub requests: u64,
    pub cache_hits: u64,
    pub prompt_chars: u64,
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, prompt: &PromptText) -> Result<RawResponse, GatewayError>;

    fn model_id(&self) -> &str;

    fn stats(&self) -> GatewayStats {
        GatewayStats::default()
    }
}
