//! Model-completion contract and its implementations.
//!
//! - [`OpenAiBackend`]: live OpenAI-compatible chat-completions over HTTP.
//! - [`ScriptedBackend`]: canned completions from agent- and phase-keyed queues.
//! - [`ReplayBackend`]: content-addressed record/replay cache in front of any
//!   other backend (or none, in which case a miss is terminal).

mod cache;
mod openai;
mod scripted;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::profiles::AgentId;
use crate::prompting::{Phase, PromptBundle};

pub use cache::{CacheEntry, CacheStore, RecordOutcome, ReplayBackend};
pub use openai::{OpenAiBackend, OpenAiConfig, RetryPolicy, API_KEY_ENV};
pub use scripted::{Script, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendErrorKind {
    Network,
    Auth,
    RateLimit,
    MalformedReply,
    CacheMiss,
    Io,
}

impl BackendErrorKind {
    pub fn is_retriable(self) -> bool {
        matches!(self, BackendErrorKind::Network | BackendErrorKind::RateLimit)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{kind:?} ({}): {message}", if self.retriable() { "retriable" } else { "terminal" })]
pub struct BackendError {
    pub kind: BackendErrorKind,
    pub message: String,
}

impl BackendError {
    pub fn new(kind: BackendErrorKind, message: impl Into<String>) -> Self {
        BackendError {
            kind,
            message: message.into(),
        }
    }

    pub fn retriable(&self) -> bool {
        self.kind.is_retriable()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestParams {
    pub model: String,
    pub temperature: f64,
    pub seed: i64,
    pub max_tokens: u32,
}

/// Routing metadata set by the engine. It is hashed into the cache key but
/// never sent over the wire.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Route {
    pub agent_id: AgentId,
    pub phase: Phase,
}

impl Route {
    pub fn new(agent_id: AgentId, phase: Phase) -> Self {
        Route { agent_id, phase }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<Message>,
    pub params: RequestParams,
    #[serde(default)]
    pub route: Option<Route>,
}

impl CompletionRequest {
    pub fn from_bundle(bundle: &PromptBundle, model: &str, route: Option<Route>) -> Self {
        CompletionRequest {
            messages: vec![
                Message {
                    role: Role::System,
                    content: bundle.system_text.clone(),
                },
                Message {
                    role: Role::User,
                    content: bundle.user_text.clone(),
                },
            ],
            params: RequestParams {
                model: model.to_string(),
                temperature: bundle.params.temperature,
                seed: bundle.params.seed,
                max_tokens: bundle.params.max_tokens,
            },
            route,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.messages.first() {
            None => Err(BackendError::new(
                BackendErrorKind::MalformedReply,
                "request has no messages",
            )),
            Some(m) if m.role != Role::System => Err(BackendError::new(
                BackendErrorKind::MalformedReply,
                "first message must have role system",
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Live,
    Scripted,
    Cache,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub usage: Option<Usage>,
    pub source: Source,
}

pub trait ModelBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError>;
}

impl<B: ModelBackend + ?Sized> ModelBackend for Box<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        (**self).complete(req)
    }
}

impl<B: ModelBackend + ?Sized> ModelBackend for Arc<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        (**self).complete(req)
    }
}

impl<B: ModelBackend + ?Sized> ModelBackend for &B {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        (**self).complete(req)
    }
}

/// Hex SHA-256 digest of a request's canonical serialization.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(pub String);

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

const CANONICAL_TAG: &str = "delib-completion-request/v1";

fn field(h: &mut Sha256, name: &str, value: &[u8]) {
    h.update(name.as_bytes());
    h.update(b"=");
    h.update(value.len().to_string().as_bytes());
    h.update(b":");
    h.update(value);
    h.update(b"\n");
}

/// Every variable-length field is length-prefixed and the temperature is
/// hashed by its IEEE-754 bit pattern, so distinct requests never share a
/// canonical byte string.
pub fn cache_key(req: &CompletionRequest) -> CacheKey {
    let mut h = Sha256::new();
    h.update(CANONICAL_TAG.as_bytes());
    h.update(b"\n");
    field(&mut h, "model", req.params.model.as_bytes());
    field(
        &mut h,
        "temperature",
        format!("{:016x}", req.params.temperature.to_bits()).as_bytes(),
    );
    field(&mut h, "seed", req.params.seed.to_string().as_bytes());
    field(&mut h, "max_tokens", req.params.max_tokens.to_string().as_bytes());
    match &req.route {
        Some(r) => {
            field(&mut h, "route.agent_id", r.agent_id.as_str().as_bytes());
            field(&mut h, "route.phase", r.phase.as_str().as_bytes());
        }
        None => field(&mut h, "route", b""),
    }
    field(&mut h, "messages", req.messages.len().to_string().as_bytes());
    for m in &req.messages {
        field(&mut h, m.role.as_str(), m.content.as_bytes());
    }
    CacheKey(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(content: &str) -> CompletionRequest {
        CompletionRequest {
            messages: vec![
                Message { role: Role::System, content: "sys".into() },
                Message { role: Role::User, content: content.into() },
            ],
            params: RequestParams {
                model: "m".into(),
                temperature: 0.7,
                seed: 1,
                max_tokens: 10,
            },
            route: None,
        }
    }

    #[test]
    fn key_is_deterministic_and_sensitive() {
        assert_eq!(cache_key(&req("hello")), cache_key(&req("hello")));
        assert_ne!(cache_key(&req("hello")), cache_key(&req("hellp")));
        assert_ne!(cache_key(&req("hello")), cache_key(&req("hello ")));
        assert_eq!(cache_key(&req("x")).0.len(), 64);
    }

    #[test]
    fn message_boundaries_matter() {
        let mut a = req("");
        a.messages[0].content = "ab".into();
        a.messages[1].content = "c".into();
        let mut b = req("");
        b.messages[0].content = "a".into();
        b.messages[1].content = "bc".into();
        assert_ne!(cache_key(&a), cache_key(&b));
    }

    #[test]
    fn request_validation() {
        let mut r = req("x");
        assert!(r.validate().is_ok());
        r.messages.swap(0, 1);
        assert!(r.validate().is_err());
        r.messages.clear();
        assert!(r.validate().is_err());
    }

    #[test]
    fn retriability() {
        assert!(BackendError::new(BackendErrorKind::RateLimit, "x").retriable());
        assert!(BackendError::new(BackendErrorKind::Network, "x").retriable());
        assert!(!BackendError::new(BackendErrorKind::Auth, "x").retriable());
        assert!(!BackendError::new(BackendErrorKind::MalformedReply, "x").retriable());
        assert!(BackendError::new(BackendErrorKind::CacheMiss, "cache miss")
            .to_string()
            .contains("terminal"));
    }
}
