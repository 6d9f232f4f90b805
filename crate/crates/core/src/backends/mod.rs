//! Uniform access to the chat, prover and embedding models.
//!
//! Every model interaction in the pipeline is routed through [`Backends`],
//! which owns one profile per [`Role`], applies the retry policy and converts
//! provider usage into a [`UsageRecord`]. Live profiles speak the open
//! chat-completions wire format ([`openai`]); offline runs use the
//! [`scripted`] doubles or the deterministic [`hashing`] embedder.

pub mod hashing;
pub mod openai;
pub mod scripted;
mod usage;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use usage::{estimate_tokens, RoleUsage, UsageRecord};

/// Which part of the pipeline a model call serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Reasoner,
    Autoformalizer,
    Prover,
    Judge,
    Embedder,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Reasoner,
        Role::Autoformalizer,
        Role::Prover,
        Role::Judge,
        Role::Embedder,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Reasoner => "reasoner",
            Role::Autoformalizer => "autoformalizer",
            Role::Prover => "prover",
            Role::Judge => "judge",
            Role::Embedder => "embedder",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown backend role `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageRole {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub id: String,
    pub name: String,
    /// Raw JSON argument object as produced by the model.
    pub arguments: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self::plain(MessageRole::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::plain(MessageRole::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::plain(MessageRole::Assistant, content)
    }

    pub fn tool(call_id: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::Tool,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: Some(call_id.into()),
        }
    }

    fn plain(role: MessageRole, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: None,
        }
    }
}

/// Function-style tool offered to the chat model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDeclaration {
    pub name: String,
    pub description: String,
    /// JSON schema of the argument object.
    pub parameters: serde_json::Value,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub tools: Vec<ToolDeclaration>,
    pub sampling: SamplingParams,
}

/// Token counts reported by a provider for one call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatReply {
    #[serde(default)]
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedReply {
    pub vector: Vec<f64>,
    pub usage: Option<TokenUsage>,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed reply: {0}")]
    MalformedReply(String),
    #[error("script exhausted after {calls} calls ({backend})")]
    ScriptExhausted { backend: String, calls: usize },
    #[error("backend configuration error: {0}")]
    Config(String),
    /// An error recorded in a trace, reproduced verbatim during replay.
    #[error("{0}")]
    Replayed(String),
    #[error("{role} backend unavailable after {attempts} attempts: {last}")]
    Unavailable {
        role: Role,
        attempts: u32,
        last: String,
    },
}

impl BackendError {
    fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatReply, BackendError>;

    fn model(&self) -> &str;
}

#[async_trait]
pub trait EmbedBackend: Send + Sync {
    async fn embed(&self, text: &str) -> Result<EmbedReply, BackendError>;

    fn model(&self) -> &str;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 2,
            backoff_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            retries: 0,
            backoff_ms: 0,
        }
    }
}

/// One role's bound backend with its sampling defaults and retry policy.
#[derive(Clone)]
pub struct ChatProfile {
    pub backend: Arc<dyn ChatBackend>,
    pub sampling: SamplingParams,
    pub retry: RetryPolicy,
}

impl ChatProfile {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            sampling: SamplingParams::default(),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_sampling(mut self, sampling: SamplingParams) -> Self {
        self.sampling = sampling;
        self
    }
}

#[derive(Clone)]
pub struct EmbedProfile {
    pub backend: Arc<dyn EmbedBackend>,
    pub retry: RetryPolicy,
}

/// A chat reply together with the usage it was charged.
#[derive(Debug, Clone)]
pub struct RoleReply {
    pub reply: ChatReply,
    pub usage: UsageRecord,
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub usage: UsageRecord,
}

/// Role router. The judge role falls back to the reasoner profile when no
/// dedicated judge is configured.
#[derive(Clone, Default)]
pub struct Backends {
    chat: BTreeMap<Role, ChatProfile>,
    embedder: Option<EmbedProfile>,
    calls: Arc<CallCounters>,
}

#[derive(Default)]
struct CallCounters {
    per_role: [AtomicU64; 5],
}

impl CallCounters {
    fn bump(&self, role: Role) {
        self.per_role[role as usize].fetch_add(1, Ordering::Relaxed);
    }

    fn get(&self, role: Role) -> u64 {
        self.per_role[role as usize].load(Ordering::Relaxed)
    }
}

impl Backends {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_chat(mut self, role: Role, profile: ChatProfile) -> Self {
        assert!(role != Role::Embedder, "embedder is not a chat role");
        self.chat.insert(role, profile);
        self
    }

    pub fn with_embedder(mut self, backend: Arc<dyn EmbedBackend>, retry: RetryPolicy) -> Self {
        self.embedder = Some(EmbedProfile { backend, retry });
        self
    }

    pub fn has_role(&self, role: Role) -> bool {
        match role {
            Role::Embedder => self.embedder.is_some(),
            _ => self.resolve(role).is_some(),
        }
    }

    /// Model name bound to `role`, used to pick prompt-catalog variants.
    pub fn model_name(&self, role: Role) -> Option<String> {
        match role {
            Role::Embedder => self.embedder.as_ref().map(|e| e.backend.model().to_string()),
            _ => self.resolve(role).map(|p| p.backend.model().to_string()),
        }
    }

    /// Transport-level attempts made against each role so far, retries
    /// included.
    pub fn attempts(&self, role: Role) -> u64 {
        self.calls.get(role)
    }

    fn resolve(&self, role: Role) -> Option<&ChatProfile> {
        self.chat.get(&role).or_else(|| match role {
            Role::Judge => self.chat.get(&Role::Reasoner),
            _ => None,
        })
    }

    pub async fn chat(
        &self,
        role: Role,
        messages: Vec<ChatMessage>,
        tools: &[ToolDeclaration],
        seed: Option<u64>,
    ) -> Result<RoleReply, BackendError> {
        let profile = self
            .resolve(role)
            .ok_or_else(|| BackendError::Config(format!("no backend profile for role {role}")))?;
        let mut sampling = profile.sampling.clone();
        if seed.is_some() {
            sampling.seed = seed;
        }
        let request = ChatRequest {
            messages,
            tools: tools.to_vec(),
            sampling,
        };
        let reply = with_retry(role, profile.retry, || {
            self.calls.bump(role);
            profile.backend.chat(&request)
        })
        .await?;
        let usage = match reply.usage {
            Some(u) => UsageRecord::for_call(role, u.prompt_tokens, u.completion_tokens, false),
            None => UsageRecord::for_call(
                role,
                estimate_request_tokens(&request.messages),
                estimate_reply_tokens(&reply),
                true,
            ),
        };
        Ok(RoleReply { reply, usage })
    }

    pub async fn embed(&self, text: &str) -> Result<Embedding, BackendError> {
        let profile = self
            .embedder
            .as_ref()
            .ok_or_else(|| BackendError::Config("no embedder profile configured".into()))?;
        if text.trim().is_empty() {
            return Err(BackendError::Config("cannot embed empty text".into()));
        }
        let reply = with_retry(Role::Embedder, profile.retry, || {
            self.calls.bump(Role::Embedder);
            profile.backend.embed(text)
        })
        .await?;
        let usage = match reply.usage {
            Some(u) => UsageRecord::for_call(Role::Embedder, u.prompt_tokens, 0, false),
            None => UsageRecord::for_call(Role::Embedder, estimate_tokens(text), 0, true),
        };
        Ok(Embedding {
            vector: reply.vector,
            usage,
        })
    }
}

pub fn estimate_request_tokens(messages: &[ChatMessage]) -> u64 {
    messages
        .iter()
        .map(|m| {
            estimate_tokens(&m.content)
                + m.tool_calls
                    .iter()
                    .map(|c| estimate_tokens(&c.arguments))
                    .sum::<u64>()
        })
        .sum()
}

fn estimate_reply_tokens(reply: &ChatReply) -> u64 {
    estimate_tokens(&reply.content)
        + reply
            .tool_calls
            .iter()
            .map(|c| estimate_tokens(&c.arguments))
            .sum::<u64>()
}

async fn with_retry<T, F, Fut>(role: Role, policy: RetryPolicy, mut call: F) -> Result<T, BackendError>
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = Result<T, BackendError>>,
{
    let mut attempt = 0u32;
    loop {
        match call().await {
            Ok(v) => return Ok(v),
            Err(e) if e.is_retryable() && attempt < policy.retries => {
                attempt += 1;
                tracing::warn!(%role, attempt, error = %e, "retrying backend call");
                let backoff = policy.backoff_ms.saturating_mul(1 << (attempt - 1).min(6));
                tokio::time::sleep(Duration::from_millis(backoff)).await;
            }
            Err(e) if e.is_retryable() => {
                return Err(BackendError::Unavailable {
                    role,
                    attempts: attempt + 1,
                    last: e.to_string(),
                })
            }
            Err(e) => return Err(e),
        }
    }
}
