use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::cache::{cache_key, ResponseCache};
use super::limiter::{InFlightLimiter, TokenBucket};
use super::{BackendConfig, CompletionBackend, GatewayError, GatewayStats, RawResponse};
use crate::prompt::PromptText;

/// Delay before retry number `retry` (1-based): `base * 2^(retry-1)`, capped.
pub fn backoff_delay(base_ms: u64, max_ms: u64, retry: u32) -> Duration {
    let factor = 1u64.checked_shl(retry.saturating_sub(1)).unwrap_or(u64::MAX);
    Duration::from_millis(base_ms.saturating_mul(factor).min(max_ms))
}

enum Attempt {
    Done(String),
    Retry { rate_limited: bool, detail: String },
    Fail(GatewayError),
}

/// Chat-completions client for any OpenAI-compatible endpoint.
pub struct HttpBackend {
    cfg: BackendConfig,
    client: Client,
    api_key: Option<String>,
    cache: Option<ResponseCache>,
    in_flight: InFlightLimiter,
    bucket: Option<TokenBucket>,
    requests: AtomicU64,
    cache_hits: AtomicU64,
    prompt_chars: AtomicU64,
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_s))
            .build()
            .map_err(|e| GatewayError::InvalidConfig(e.to_string()))?;
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        let cache = cfg.cache_dir.as_ref().map(ResponseCache::open).transpose()?;
        Ok(Self {
            in_flight: InFlightLimiter::new(cfg.max_in_flight),
            bucket: cfg.rate_limit_rps.map(TokenBucket::new),
            cfg,
            client,
            api_key,
            cache,
            requests: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
            prompt_chars: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    pub fn request_body(&self, prompt: &PromptText) -> Value {
        json!({
            "model": self.cfg.model_id,
            "temperature": self.cfg.temperature,
            "messages": [{"role": "user", "content": prompt.text}],
        })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.cfg.endpoint_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &Value) -> Attempt {
        if let Some(bucket) = &self.bucket {
            bucket.acquire();
        }
        let _permit = self.in_flight.acquire();
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut req = self.client.post(self.url()).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(resp) => resp,
            Err(e) => {
                return Attempt::Retry {
                    rate_limited: false,
                    detail: e.to_string(),
                }
            }
        };
        let status = resp.status();
        let text = resp.text().unwrap_or_default();
        if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            return Attempt::Fail(GatewayError::Auth {
                status: status.as_u16(),
                body: text,
            });
        }
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Attempt::Retry {
                rate_limited: status == StatusCode::TOO_MANY_REQUESTS,
                detail: format!("HTTP {status}: {text:.200}"),
            };
        }
        if !status.is_success() {
            return Attempt::Fail(GatewayError::Transport {
                attempts: 1,
                detail: format!("HTTP {status}: {text:.200}"),
            });
        }
        match extract_content(&text) {
            Ok(content) => Attempt::Done(content),
            Err(e) => Attempt::Fail(e),
        }
    }
}

/// Reads `choices[0].message.content`; empty content or an explicit refusal
/// is reported as [`GatewayError::ContentRefusal`].
pub(crate) fn extract_content(body: &str) -> Result<String, GatewayError> {
    let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::Transport {
        attempts: 1,
        detail: format!("response is not JSON: {e}"),
    })?;
    let message = &v["choices"][0]["message"];
    if let Some(refusal) = message["refusal"].as_str().filter(|r| !r.is_empty()) {
        return Err(GatewayError::ContentRefusal(refusal.to_string()));
    }
    match message["content"].as_str() {
        Some(content) if !content.trim().is_empty() => Ok(content.to_string()),
        _ => Err(GatewayError::ContentRefusal("empty content".into())),
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, prompt: &PromptText) -> Result<RawResponse, GatewayError> {
        let started = Instant::now();
        let key = cache_key(&self.cfg.model_id, self.cfg.temperature, &prompt.prompt_hash);
        if let Some(cache) = &self.cache {
            if let Some(text) = cache.get(&key)? {
                self.cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(RawResponse {
                    text,
                    model_id: self.cfg.model_id.clone(),
                    latency_ms: started.elapsed().as_millis() as u64,
                    from_cache: true,
                    attempt_count: 0,
                });
            }
        }
        self.prompt_chars.fetch_add(prompt.text.chars().count() as u64, Ordering::Relaxed);
        let body = self.request_body(prompt);
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Attempt::Done(text) => {
                    if let Some(cache) = &self.cache {
                        cache.put(&key, &text)?;
                    }
                    return Ok(RawResponse {
                        text,
                        model_id: self.cfg.model_id.clone(),
                        latency_ms: started.elapsed().as_millis() as u64,
                        from_cache: false,
                        attempt_count: attempts,
                    });
                }
                Attempt::Fail(GatewayError::Transport { detail, .. }) => {
                    return Err(GatewayError::Transport { attempts, detail })
                }
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry { rate_limited, detail } => {
                    if attempts > self.cfg.max_retries {
                        return Err(if rate_limited {
                            GatewayError::RateLimited { attempts }
                        } else {
                            GatewayError::Transport { attempts, detail }
                        });
                    }
                    std::thread::sleep(backoff_delay(self.cfg.backoff_base_ms, self.cfg.backoff_max_ms, attempts));
                }
            }
        }
    }

    fn model_id(&self) -> &str {
        &self.cfg.model_id
    }

    fn stats(&self) -> GatewayStats {
        GatewayStats {
            requests: self.requests.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            prompt_chars: self.prompt_chars.load(Ordering::Relaxed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_is_monotone_and_capped() {
        let delays: Vec<_> = (1..=12).map(|r| backoff_delay(100, 5_000, r)).collect();
        assert_eq!(delays[0], Duration::from_millis(100));
        assert_eq!(delays[1], Duration::from_millis(200));
        assert!(delays.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*delays.last().unwrap(), Duration::from_millis(5_000));
        assert_eq!(backoff_delay(100, 5_000, 200), Duration::from_millis(5_000));
    }

    #[test]
    fn content_extraction() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"{\"prediction\": 3}"}}]}"#;
        assert_eq!(extract_content(ok).unwrap(), "{\"prediction\": 3}");
        let empty = r#"{"choices":[{"message":{"role":"assistant","content":""}}]}"#;
        assert!(matches!(extract_content(empty), Err(GatewayError::ContentRefusal(_))));
        let refused = r#"{"choices":[{"message":{"content":null,"refusal":"I can't help"}}]}"#;
        assert!(matches!(extract_content(refused), Err(GatewayError::ContentRefusal(_))));
        assert!(matches!(extract_content("oops"), Err(GatewayError::Transport { .. })));
    }

    #[test]
    fn body_carries_model_and_temperature() {
        let backend = HttpBackend::new(BackendConfig {
            temperature: 0.5,
            ..BackendConfig::default()
        })
        .unwrap();
        let body = backend.request_body(&PromptText::new("t", "hi".into(), 1));
        assert_eq!(body["temperature"], json!(0.5));
        assert_eq!(body["model"], json!("gpt-3.5-turbo-0613"));
        assert_eq!(body["messages"], json!([{"role": "user", "content": "hi"}]));
    }
}
