//! Episode traces: ordered events, persisted one JSON object per line.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agent::EpisodeConfig;
use crate::backends::{ChatMessage, ChatReply, TokenUsage, UsageRecord};
use crate::harness::dataset::ProblemInstance;
use crate::prover::{VerdictLabel, VerificationVerdict};
use crate::translator::ProofStep;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Answered,
    TokenBudget,
    TimeLimit,
    BackendError,
    ToolCallLimit,
    /// The model stopped without a tool call or a final answer.
    NoAnswer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckMethod {
    Exact,
    Judge,
    Unavailable,
}

/// A backend turn as received, kept so replays can reproduce it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedReply {
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<crate::backends::ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_usage: Option<TokenUsage>,
}

impl From<ChatReply> for RecordedReply {
    fn from(r: ChatReply) -> Self {
        Self {
            content: r.content,
            tool_calls: r.tool_calls,
            reported_usage: r.usage,
        }
    }
}

impl From<RecordedReply> for ChatReply {
    fn from(r: RecordedReply) -> Self {
        Self {
            content: r.content,
            tool_calls: r.tool_calls,
            usage: r.reported_usage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    Started {
        episode_id: String,
        problem: ProblemInstance,
        config: EpisodeConfig,
    },
    /// User or tool message appended to the conversation.
    Message { message: ChatMessage },
    /// Reasoner turn.
    Reply { reply: RecordedReply },
    /// Reasoner call that failed; `error` is the final error text.
    ReplyError { error: String },
    ToolCall {
        call_id: String,
        arguments: String,
        step: Option<ProofStep>,
    },
    Verdict {
        call_id: String,
        verdict: VerificationVerdict,
    },
    Usage { source: String, delta: UsageRecord },
    Note { text: String },
    AnswerCheck {
        answer: String,
        ground_truth: String,
        correct: bool,
        method: CheckMethod,
        judge_replies: Vec<RecordedReply>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Terminated {
        reason: TerminationReason,
        final_answer: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    /// Milliseconds since the episode started.
    pub at_ms: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub events: Vec<TraceEvent>,
    #[serde(skip)]
    started: Option<Instant>,
}

/// Traces compare by their events only.
impl PartialEq for EpisodeTrace {
    fn eq(&self, other: &Self) -> bool {
        self.events == other.events
    }
}

impl Default for EpisodeTrace {
    fn default() -> Self {
        Self::new()
    }
}

impl EpisodeTrace {
    pub fn new() -> Self {
        Self {
            events: Vec::new(),
            started: Some(Instant::now()),
        }
    }

    pub fn from_events(events: Vec<TraceEvent>) -> Self {
        Self { events, started: None }
    }

    pub fn push(&mut self, kind: EventKind) {
        let at_ms = self.started.map(|s| s.elapsed().as_millis() as u64).unwrap_or(0);
        self.events.push(TraceEvent {
            seq: self.events.len() as u64,
            at_ms,
            kind,
        });
    }

    pub fn termination(&self) -> Option<TerminationReason> {
        self.events.iter().find_map(|e| match &e.kind {
            EventKind::Terminated { reason, .. } => Some(*reason),
            _ => None,
        })
    }

    pub fn verdicts(&self) -> Vec<VerdictLabel> {
        self.events
            .iter()
            .filter_map(|e| match &e.kind {
                EventKind::Verdict { verdict, .. } => Some(verdict.label),
                _ => None,
            })
            .collect()
    }

    pub fn tool_calls(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::ToolCall { .. }))
            .count()
    }

    /// Sum of every usage delta.
    pub fn usage(&self) -> UsageRecord {
        self.events
            .iter()
            .filter_map(|e| match &e.kind {
                EventKind::Usage { delta, .. } => Some(delta.clone()),
                _ => None,
            })
            .sum()
    }

    /// Copy with every timestamp zeroed, for comparisons.
    pub fn without_timestamps(&self) -> EpisodeTrace {
        let events = self
            .events
            .iter()
            .map(|e| TraceEvent {
                at_ms: 0,
                ..e.clone()
            })
            .collect();
        Self::from_events(events)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, String> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: TraceEvent = serde_json::from_str(line).map_err(|err| format!("line {}: {err}", i + 1))?;
            events.push(e);
        }
        Ok(Self::from_events(events))
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let mut text = String::new();
        for line in BufReader::new(std::fs::File::open(path)?).lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Self::parse_jsonl(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}
