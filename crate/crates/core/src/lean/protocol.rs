//! Wire types for the line-delimited REPL protocol.
//!
//! Requests are one JSON object per line, terminated by a blank line:
//! `{"cmd": "<source>"}`. Responses are JSON objects (single-line or
//! pretty-printed) carrying an environment id and an optional message list:
//! `{"env": 0, "messages": [{"severity": "warning", "pos": {"line": 1,
//! "column": 8}, "data": "declaration uses 'sorry'"}]}`. A top-level
//! `message` field signals a request the REPL could not process.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub cmd: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WirePos {
    pub line: u32,
    /// Zero-based, as emitted by the REPL.
    pub column: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireMessage {
    pub severity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<WirePos>,
    #[serde(default, rename = "endPos", skip_serializing_if = "Option::is_none")]
    pub end_pos: Option<WirePos>,
    pub data: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub messages: Vec<WireMessage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sorries: Vec<serde_json::Value>,
    /// Request-level failure reported by the REPL itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

/// Serializes a request with its blank-line terminator.
pub fn encode_request(cmd: &str) -> String {
    let mut line = serde_json::to_string(&Request {
        cmd: cmd.to_string(),
        env: None,
    })
    .expect("request serializes");
    line.push_str("\n\n");
    line
}
