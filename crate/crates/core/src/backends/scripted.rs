//! Deterministic playback doubles for offline runs and tests.
//!
//! A [`ScriptedChat`] replays an ordered list of [`ScriptItem`]s. Each item
//! may carry a matcher over the newest input message; a mismatch panics with
//! a diagnostic naming the expected and actual input so that a drifting call
//! graph fails the test run immediately. Running past the end of the script
//! returns [`BackendError::ScriptExhausted`].

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{
    BackendError, ChatBackend, ChatReply, ChatRequest, EmbedBackend, EmbedReply, TokenUsage, ToolCall,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// Newest message content contains the string.
    Contains(String),
    /// Newest message content equals the string exactly.
    Exact(String),
}

impl Matcher {
    fn matches(&self, actual: &str) -> bool {
        match self {
            Matcher::Contains(s) => actual.contains(s.as_str()),
            Matcher::Exact(s) => actual == s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScriptReply {
    Content {
        text: String,
    },
    ToolCall {
        name: String,
        arguments: serde_json::Value,
    },
    TransportError {
        message: String,
    },
    /// A complete assistant turn reproduced verbatim, tool call ids included.
    Turn {
        #[serde(default)]
        content: String,
        #[serde(default)]
        tool_calls: Vec<ToolCall>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptItem {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<Matcher>,
    pub reply: ScriptReply,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
}

impl ScriptItem {
    pub fn content(text: impl Into<String>) -> Self {
        Self {
            expect: None,
            reply: ScriptReply::Content { text: text.into() },
            usage: None,
        }
    }

    /// Tool call whose argument object is `{"proof_step": step}`.
    pub fn proof_step_call(tool: &str, step: impl Into<String>) -> Self {
        Self {
            expect: None,
            reply: ScriptReply::ToolCall {
                name: tool.to_string(),
                arguments: serde_json::json!({ "proof_step": step.into() }),
            },
            usage: None,
        }
    }

    pub fn transport_error(message: impl Into<String>) -> Self {
        Self {
            expect: None,
            reply: ScriptReply::TransportError {
                message: message.into(),
            },
            usage: None,
        }
    }

    pub fn expecting(mut self, matcher: Matcher) -> Self {
        self.expect = Some(matcher);
        self
    }

    pub fn with_usage(mut self, prompt_tokens: u64, completion_tokens: u64) -> Self {
        self.usage = Some(TokenUsage {
            prompt_tokens,
            completion_tokens,
        });
        self
    }
}

/// Ordered playback chat double. Serializes internally so script order is
/// preserved under concurrent callers.
pub struct ScriptedChat {
    name: String,
    items: Vec<ScriptItem>,
    cursor: Mutex<usize>,
    calls: AtomicUsize,
    requests: Mutex<Vec<ChatRequest>>,
}

impl ScriptedChat {
    pub fn new(name: impl Into<String>, items: Vec<ScriptItem>) -> Self {
        Self {
            name: name.into(),
            items,
            cursor: Mutex::new(0),
            calls: AtomicUsize::new(0),
            requests: Mutex::new(Vec::new()),
        }
    }

    /// Loads a script stored as a JSON array of items.
    pub fn from_file(name: impl Into<String>, path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("reading script {}: {e}", path.display())))?;
        let items: Vec<ScriptItem> = serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("parsing script {}: {e}", path.display())))?;
        Ok(Self::new(name, items))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn remaining(&self) -> usize {
        self.items.len() - *self.cursor.lock().unwrap()
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().unwrap().clone()
    }
}

#[async_trait]
impl ChatBackend for ScriptedChat {
    async fn chat(&self, request: &ChatRequest) -> Result<ChatReply, BackendError> {
        let item = {
            let mut cursor = self.cursor.lock().unwrap();
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.requests.lock().unwrap().push(request.clone());
            let Some(item) = self.items.get(*cursor) else {
                return Err(BackendError::ScriptExhausted {
                    backend: self.name.clone(),
                    calls: self.calls.load(Ordering::SeqCst),
                });
            };
            *cursor += 1;
            item.clone()
        };
        let call_index = self.calls.load(Ordering::SeqCst);
        if let Some(matcher) = &item.expect {
            let actual = request
                .messages
                .last()
                .map(|m| m.content.as_str())
                .unwrap_or("");
            if !matcher.matches(actual) {
                panic!(
                    "script `{}` call {call_index}: expected input {matcher:?}, got {actual:?}",
                    self.name
                );
            }
        }
        match item.reply {
            ScriptReply::Content { text } => Ok(ChatReply {
                content: text,
                tool_calls: Vec::new(),
                usage: item.usage,
            }),
            ScriptReply::ToolCall { name, arguments } => Ok(ChatReply {
                content: String::new(),
                tool_calls: vec![ToolCall {
                    id: format!("call_{call_index}"),
                    name,
                    arguments: arguments.to_string(),
                }],
                usage: item.usage,
            }),
            ScriptReply::TransportError { message } => Err(BackendError::Transport(message)),
            ScriptReply::Turn { content, tool_calls } => Ok(ChatReply {
                content,
                tool_calls,
                usage: item.usage,
            }),
        }
    }

    fn model(&self) -> &str {
        &self.name
    }
}

/// Text-to-vector playback embedder with an optional fallback for texts the
/// script does not mention.
pub struct ScriptedEmbedder {
    name: String,
    vectors: HashMap<String, Vec<f64>>,
    fallback: Option<Arc<dyn EmbedBackend>>,
    calls: AtomicUsize,
}

impl ScriptedEmbedder {
    pub fn new(vectors: impl IntoIterator<Item = (String, Vec<f64>)>) -> Self {
        Self {
            name: "scripted-embedder".into(),
            vectors: vectors.into_iter().collect(),
            fallback: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_fallback(mut self, fallback: Arc<dyn EmbedBackend>) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl EmbedBackend for ScriptedEmbedder {
    async fn embed(&self, text: &str) -> Result<EmbedReply, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(v) = self.vectors.get(text) {
            return Ok(EmbedReply {
                vector: v.clone(),
                usage: None,
            });
        }
        match &self.fallback {
            Some(f) => f.embed(text).await,
            None => Err(BackendError::MalformedReply(format!(
                "no scripted embedding for {text:?}"
            ))),
        }
    }

    fn model(&self) -> &str {
        &self.name
    }
}
