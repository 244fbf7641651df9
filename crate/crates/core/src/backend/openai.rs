//! OpenAI-compatible `POST {base_url}/chat/completions` client with bounded
//! exponential-backoff retries.

use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::{
    BackendError, BackendErrorKind, CompletionRequest, CompletionResult, Message, ModelBackend,
    Source, Usage,
};

pub const API_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub factor: u32,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base_delay: Duration::from_secs(1),
            factor: 2,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay * self.factor.saturating_pow(retry.saturating_sub(1))
    }
}

#[derive(Debug, Clone)]
pub struct OpenAiConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl OpenAiConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        OpenAiConfig {
            base_url: base_url.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        }
    }

    /// Reads the API key from [`API_KEY_ENV`].
    pub fn with_env_key(mut self) -> Self {
        self.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        self
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    seed: i64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

pub struct OpenAiBackend {
    config: OpenAiConfig,
    client: reqwest::blocking::Client,
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::new(BackendErrorKind::Network, e.to_string()))?;
        Ok(OpenAiBackend { config, client })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let body = WireRequest {
            model: &req.params.model,
            messages: &req.messages,
            temperature: req.params.temperature,
            seed: req.params.seed,
            max_tokens: req.params.max_tokens,
        };
        let mut builder = self.client.post(self.endpoint()).json(&body);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder
            .send()
            .map_err(|e| BackendError::new(BackendErrorKind::Network, e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| BackendError::new(BackendErrorKind::Network, e.to_string()))?;
        if !status.is_success() {
            let kind = match status.as_u16() {
                401 | 403 => BackendErrorKind::Auth,
                429 => BackendErrorKind::RateLimit,
                s if s >= 500 => BackendErrorKind::Network,
                _ => BackendErrorKind::MalformedReply,
            };
            return Err(BackendError::new(kind, format!("HTTP {status}: {text}")));
        }
        let parsed: WireResponse = serde_json::from_str(&text).map_err(|e| {
            BackendError::new(BackendErrorKind::MalformedReply, format!("bad reply body: {e}"))
        })?;
        let choice = parsed.choices.into_iter().next().ok_or_else(|| {
            BackendError::new(BackendErrorKind::MalformedReply, "reply has no choices")
        })?;
        Ok(CompletionResult {
            text: choice.message.content.unwrap_or_default(),
            usage: parsed.usage,
            source: Source::Live,
        })
    }
}

impl ModelBackend for OpenAiBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        req.validate()?;
        let policy = self.config.retry;
        let mut attempt = 1;
        loop {
            match self.attempt(req) {
                Ok(r) => return Ok(r),
                Err(e) if e.retriable() && attempt < policy.max_attempts => {
                    let delay = policy.delay(attempt);
                    warn!("attempt {attempt} failed ({e}); retrying in {delay:?}");
                    thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => {
                    debug!("giving up after {attempt} attempt(s)");
                    return Err(e);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_schedule() {
        let p = RetryPolicy::default();
        let delays: Vec<_> = (1..5).map(|r| p.delay(r).as_secs()).collect();
        assert_eq!(delays, vec![1, 2, 4, 8]);
    }
}
