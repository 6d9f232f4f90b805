//! HTTP client for chat-completions compatible endpoints.

use std::time::Duration;

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    BackendError, ChatBackend, ChatMessage, ChatReply, ChatRequest, EmbedBackend, EmbedReply, MessageRole,
    TokenUsage, ToolCall,
};

#[derive(Debug, Clone)]
pub struct HttpProfile {
    /// Base URL up to and including the API version, e.g. `https://host/v1`.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub request_timeout: Duration,
}

pub struct OpenAiChat {
    profile: HttpProfile,
    client: reqwest::Client,
}

impl OpenAiChat {
    pub fn new(profile: HttpProfile) -> Result<Self, BackendError> {
        Ok(Self {
            client: build_client(&profile)?,
            profile,
        })
    }
}

fn build_client(profile: &HttpProfile) -> Result<reqwest::Client, BackendError> {
    reqwest::Client::builder()
        .timeout(profile.request_timeout)
        .build()
        .map_err(|e| BackendError::Config(e.to_string()))
}

fn message_json(m: &ChatMessage) -> Value {
    let role = match m.role {
        MessageRole::System => "system",
        MessageRole::User => "user",
        MessageRole::Assistant => "assistant",
        MessageRole::Tool => "tool",
    };
    let mut v = json!({ "role": role, "content": m.content });
    if !m.tool_calls.is_empty() {
        v["tool_calls"] = m
            .tool_calls
            .iter()
            .map(|c| {
                json!({
                    "id": c.id,
                    "type": "function",
                    "function": { "name": c.name, "arguments": c.arguments },
                })
            })
            .collect();
    }
    if let Some(id) = &m.tool_call_id {
        v["tool_call_id"] = json!(id);
    }
    v
}

/// Builds the JSON body for `POST {endpoint}/chat/completions`.
pub fn chat_body(model: &str, request: &ChatRequest) -> Value {
    let mut body = json!({
        "model": model,
        "messages": request.messages.iter().map(message_json).collect::<Vec<_>>(),
    });
    if !request.tools.is_empty() {
        body["tools"] = request
            .tools
            .iter()
            .map(|t| {
                json!({
                    "type": "function",
                    "function": {
                        "name": t.name,
                        "description": t.description,
                        "parameters": t.parameters,
                    }
                })
            })
            .collect();
    }
    let s = &request.sampling;
    if let Some(t) = s.temperature {
        body["temperature"] = json!(t);
    }
    if let Some(seed) = s.seed {
        body["seed"] = json!(seed);
    }
    if let Some(m) = s.max_tokens {
        body["max_tokens"] = json!(m);
    }
    body
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
    #[serde(default)]
    tool_calls: Vec<WireToolCall>,
}

#[derive(Deserialize)]
struct WireToolCall {
    #[serde(default)]
    id: String,
    function: WireFunction,
}

#[derive(Deserialize)]
struct WireFunction {
    name: String,
    #[serde(default)]
    arguments: String,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Parses a chat-completions response body into a [`ChatReply`].
pub fn parse_chat_response(body: &str) -> Result<ChatReply, BackendError> {
    let parsed: CompletionResponse =
        serde_json::from_str(body).map_err(|e| BackendError::MalformedReply(e.to_string()))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::MalformedReply("response has no choices".into()))?;
    Ok(ChatReply {
        content: choice.message.content.unwrap_or_default(),
        tool_calls: choice
            .message
            .tool_calls
            .into_iter()
            .map(|c| ToolCall {
                id: c.id,
                name: c.function.name,
                arguments: c.function.arguments,
            })
            .collect(),
        usage: parsed.usage.map(|u| TokenUsage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
        }),
    })
}

async fn post(
    client: &reqwest::Client,
    profile: &HttpProfile,
    path: &str,
    body: &Value,
) -> Result<String, BackendError> {
    let url = format!("{}/{path}", profile.endpoint.trim_end_matches('/'));
    let mut req = client.post(url).json(body);
    if let Some(key) = &profile.api_key {
        req = req.bearer_auth(key);
    }
    let resp = req
        .send()
        .await
        .map_err(|e| BackendError::Transport(e.to_string()))?;
    let status = resp.status();
    let text = resp
        .text()
        .await
        .map_err(|e| BackendError::Transport(e.to_string()))?;
    if !status.is_success() {
        return Err(BackendError::Status {
            status: status.as_u16(),
            body: text,
        });
    }
    Ok(text)
}

#[async_trait]
impl ChatBackend for OpenAiChat {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatReply, BackendError> {
        let body = chat_body(&self.profile.model, request);
        let text = post(&self.client, &self.profile, "chat/completions", &body).await?;
        parse_chat_response(&text)
    }

    fn model(&self) -> &str {
        &self.profile.model
    }
}

pub struct OpenAiEmbedder {
    profile: HttpProfile,
    client: reqwest::Client,
}

impl OpenAiEmbedder {
    pub fn new(profile: HttpProfile) -> Result<Self, BackendError> {
        Ok(Self {
            client: build_client(&profile)?,
            profile,
        })
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

#[async_trait]
impl EmbedBackend for OpenAiEmbedder {
    async fn embed(&self, text: &str) -> Result<EmbedReply, BackendError> {
        let body = json!({ "model": self.profile.model, "input": text });
        let raw = post(&self.client, &self.profile, "embeddings", &body).await?;
        let parsed: EmbeddingResponse =
            serde_json::from_str(&raw).map_err(|e| BackendError::MalformedReply(e.to_string()))?;
        let vector = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::MalformedReply("no embedding returned".into()))?
            .embedding;
        Ok(EmbedReply {
            vector,
            usage: parsed.usage.map(|u| TokenUsage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: 0,
            }),
        })
    }

    fn model(&self) -> &str {
        &self.profile.model
    }
}
