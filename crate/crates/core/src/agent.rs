//! The reasoning loop: chat turns, tool routing to the step verifier, budget
//! enforcement and answer grading.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::time::{timeout_at, Instant};

use crate::backends::{
    estimate_request_tokens, BackendError, Backends, ChatBackend, ChatMessage, ChatProfile, ChatReply, ChatRequest,
    RetryPolicy, Role, UsageRecord,
};
use crate::harness::dataset::ProblemInstance;
use crate::prompts::{ask_true_false, fill, Catalog};
use crate::prover::{StepVerifier, VerdictLabel, VerificationVerdict, VerifierConfig};
use crate::trace::{CheckMethod, EpisodeTrace, EventKind, RecordedReply, TerminationReason};
use crate::translator::ProofStep;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    /// Reasoner prompt plus completion tokens, summed over calls.
    pub token_budget: u64,
    #[serde(with = "crate::lean::secs")]
    pub wall_clock_limit: Duration,
    pub tool_enabled: bool,
    pub max_tool_calls: u32,
    /// Grade the final answer against the ground truth.
    pub check_answer: bool,
    /// Sampling seed passed to the reasoner.
    pub seed: Option<u64>,
    pub verifier: VerifierConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            token_budget: 8192,
            wall_clock_limit: Duration::from_secs(900),
            tool_enabled: true,
            max_tool_calls: 16,
            check_answer: true,
            seed: None,
            verifier: VerifierConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub problem_id: String,
    pub episode_id: String,
    pub final_answer: Option<String>,
    /// `None` when no answer was produced or grading was skipped.
    pub correct: Option<bool>,
    pub termination: TerminationReason,
    pub usage: UsageRecord,
    pub trace: EpisodeTrace,
}

impl EpisodeResult {
    pub fn verdicts(&self) -> Vec<VerdictLabel> {
        self.trace.verdicts()
    }

    pub fn tool_calls(&self) -> usize {
        self.trace.tool_calls()
    }

    /// Serialized form with timestamps zeroed.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.trace = c.trace.without_timestamps();
        serde_json::to_string(&c).expect("episode result serializes")
    }
}

pub struct AgentContext<'a> {
    pub backends: &'a Backends,
    pub verifier: &'a dyn StepVerifier,
    pub catalog: &'a Catalog,
}

/// Tool result text: the label token, then one line of guidance.
pub fn render_tool_result(verdict: &VerificationVerdict) -> String {
    let guidance = match verdict.label {
        VerdictLabel::Correct => "The step was proved in Lean 4 and can be relied on within its formalization.",
        VerdictLabel::Incorrect => "Lean 4 proved the negation of the formalized step, so the step needs revision.",
        VerdictLabel::VerificationFailure => {
            "Lean 4 could neither prove nor refute the step; proceed with caution or restate it with explicit context."
        }
        VerdictLabel::NoVerification => "The step was not checked because it is not a formalizable mathematical claim.",
    };
    format!("{}: {guidance}", verdict.label.token())
}

/// Content of the last `\boxed{...}` in `text`.
pub fn extract_final_answer(text: &str) -> Option<String> {
    const MARK: &str = "\\boxed{";
    let mut found = None;
    let mut from = 0;
    while let Some(off) = text[from..].find(MARK) {
        let start = from + off + MARK.len();
        let mut depth = 1;
        let mut end = None;
        for (i, c) in text[start..].char_indices() {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(start + i);
                        break;
                    }
                }
                _ => {}
            }
        }
        match end {
            Some(e) => {
                found = Some(text[start..e].trim().to_string());
                from = e + 1;
            }
            None => break,
        }
    }
    found
}

fn strip_wrapper<'a>(s: &'a str, open: &str, close: &str) -> Option<&'a str> {
    s.strip_prefix(open)?.strip_suffix(close)
}

/// Normal form used for exact matching and voting: trimmed, math delimiters
/// and `\boxed{}` removed, whitespace and a trailing period dropped,
/// lowercased.
pub fn canonicalize(answer: &str) -> String {
    let mut s = answer.trim();
    s = s.strip_suffix('.').unwrap_or(s).trim_end();
    loop {
        let next = strip_wrapper(s, "$$", "$$")
            .or_else(|| strip_wrapper(s, "$", "$"))
            .or_else(|| strip_wrapper(s, "\\(", "\\)"))
            .or_else(|| strip_wrapper(s, "\\[", "\\]"))
            .or_else(|| {
                let inner = strip_wrapper(s, "\\boxed{", "}")?;
                (extract_final_answer(s).as_deref() == Some(inner.trim())).then_some(inner)
            });
        match next {
            Some(n) => s = n.trim(),
            None => break,
        }
    }
    let mut out: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if out.ends_with('.') {
        out.pop();
    }
    out.to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerCheck {
    pub correct: bool,
    pub method: CheckMethod,
    pub judge_replies: Vec<ChatReply>,
    pub error: Option<String>,
}

/// Exact canonical match first; otherwise the judge decides, failing closed.
pub async fn check_answer(
    question: &str,
    answer: &str,
    ground_truth: &str,
    backends: &Backends,
    catalog: &Catalog,
    usage: &mut UsageRecord,
) -> AnswerCheck {
    if canonicalize(answer) == canonicalize(ground_truth) {
        return AnswerCheck {
            correct: true,
            method: CheckMethod::Exact,
            judge_replies: Vec::new(),
            error: None,
        };
    }
    let prompt = fill(
        &catalog.answer_check.template,
        &[("question", question), ("answer", answer), ("ground_truth", ground_truth)],
    );
    match ask_true_false(backends, Role::Judge, &prompt, &catalog.reask, usage).await {
        Ok(j) => AnswerCheck {
            correct: j.answer == Some(true),
            method: CheckMethod::Judge,
            judge_replies: j.replies,
            error: None,
        },
        Err(e) => AnswerCheck {
            correct: false,
            method: CheckMethod::Unavailable,
            judge_replies: Vec::new(),
            error: Some(e.to_string()),
        },
    }
}

fn malformed_verdict(detail: String) -> VerificationVerdict {
    VerificationVerdict {
        label: VerdictLabel::VerificationFailure,
        evidence: detail,
        statement: None,
        usage: UsageRecord::default(),
        translation_attempts: 0,
        jobs: Vec::new(),
        memory_entry: None,
        notes: Vec::new(),
    }
}

fn proof_step_argument(arguments: &str, parameter: &str) -> Result<String, String> {
    let v: serde_json::Value =
        serde_json::from_str(arguments).map_err(|e| format!("tool arguments are not JSON: {e}"))?;
    v.get(parameter)
        .and_then(|s| s.as_str())
        .map(str::to_string)
        .ok_or_else(|| format!("tool arguments lack a string `{parameter}`"))
}

struct Episode<'a> {
    ctx: &'a AgentContext<'a>,
    config: &'a EpisodeConfig,
    problem: &'a ProblemInstance,
    episode_id: &'a str,
    trace: EpisodeTrace,
    usage: UsageRecord,
    deadline: Instant,
    tool_calls: u32,
}

impl Episode<'_> {
    fn charge(&mut self, source: &str, delta: UsageRecord) {
        self.usage.merge(&delta);
        self.trace.push(EventKind::Usage {
            source: source.to_string(),
            delta,
        });
    }

    fn reasoner_tokens(&self) -> u64 {
        self.usage.tokens(Role::Reasoner)
    }

    async fn run(&mut self) -> (TerminationReason, Option<String>) {
        let tools = if self.config.tool_enabled {
            vec![self.ctx.catalog.tool_declaration()]
        } else {
            Vec::new()
        };
        let first = ChatMessage::user(fill(
            &self.ctx.catalog.reasoner.template,
            &[("question", &self.problem.statement)],
        ));
        self.trace.push(EventKind::Message { message: first.clone() });
        let mut messages = vec![first];

        loop {
            if Instant::now() >= self.deadline {
                return (TerminationReason::TimeLimit, None);
            }
            if self.reasoner_tokens() + estimate_request_tokens(&messages) > self.config.token_budget {
                return (TerminationReason::TokenBudget, None);
            }
            let call = self
                .ctx
                .backends
                .chat(Role::Reasoner, messages.clone(), &tools, self.config.seed);
            let reply = match timeout_at(self.deadline, call).await {
                Err(_) => return (TerminationReason::TimeLimit, None),
                Ok(Err(e)) => {
                    self.trace.push(EventKind::ReplyError { error: e.to_string() });
                    return (TerminationReason::BackendError, None);
                }
                Ok(Ok(r)) => r,
            };
            self.trace.push(EventKind::Reply {
                reply: RecordedReply::from(reply.reply.clone()),
            });
            self.charge("reasoner", reply.usage);
            let reply = reply.reply;
            let mut assistant = ChatMessage::assistant(reply.content.clone());
            assistant.tool_calls = reply.tool_calls.clone();
            messages.push(assistant);

            if !self.config.tool_enabled || reply.tool_calls.is_empty() {
                return match extract_final_answer(&reply.content) {
                    Some(a) => (TerminationReason::Answered, Some(a)),
                    None => (TerminationReason::NoAnswer, None),
                };
            }
            if self.reasoner_tokens() > self.config.token_budget {
                return (TerminationReason::TokenBudget, None);
            }
            for call in &reply.tool_calls {
                if self.tool_calls >= self.config.max_tool_calls {
                    return (TerminationReason::ToolCallLimit, None);
                }
                self.tool_calls += 1;
                let index = self.tool_calls;
                let parsed = if call.name == self.ctx.catalog.tool.name {
                    proof_step_argument(&call.arguments, &self.ctx.catalog.tool.parameter)
                } else {
                    Err(format!("unknown tool `{}`", call.name))
                };
                let step = parsed.as_ref().ok().map(|text| ProofStep::new(self.episode_id, index, text.clone()));
                self.trace.push(EventKind::ToolCall {
                    call_id: call.id.clone(),
                    arguments: call.arguments.clone(),
                    step: step.clone(),
                });
                let verdict = match (step, parsed) {
                    (Some(step), _) => {
                        let verify = self.ctx.verifier.verify(&step, &self.config.verifier);
                        match timeout_at(self.deadline, verify).await {
                            Ok(v) => v,
                            Err(_) => return (TerminationReason::TimeLimit, None),
                        }
                    }
                    (None, Err(e)) => malformed_verdict(e),
                    (None, Ok(_)) => unreachable!("step is built from every parsed argument"),
                };
                for note in &verdict.notes {
                    tracing::warn!(episode = self.episode_id, step = index, "{note}");
                }
                let rendered = render_tool_result(&verdict);
                let delta = verdict.usage.clone();
                self.trace.push(EventKind::Verdict {
                    call_id: call.id.clone(),
                    verdict,
                });
                self.charge("verifier", delta);
                let tool_message = ChatMessage::tool(call.id.clone(), rendered);
                self.trace.push(EventKind::Message {
                    message: tool_message.clone(),
                });
                messages.push(tool_message);
            }
        }
    }
}

pub async fn run_episode(
    problem: &ProblemInstance,
    episode_id: &str,
    config: &EpisodeConfig,
    ctx: &AgentContext<'_>,
) -> EpisodeResult {
    let mut episode = Episode {
        ctx,
        config,
        problem,
        episode_id,
        trace: EpisodeTrace::new(),
        usage: UsageRecord::default(),
        deadline: Instant::now() + config.wall_clock_limit,
        tool_calls: 0,
    };
    episode.trace.push(EventKind::Started {
        episode_id: episode_id.to_string(),
        problem: problem.clone(),
        config: config.clone(),
    });
    let (termination, final_answer) = episode.run().await;
    episode.trace.push(EventKind::Terminated {
        reason: termination,
        final_answer: final_answer.clone(),
    });

    let mut correct = None;
    if let (Some(answer), true) = (&final_answer, config.check_answer) {
        let mut delta = UsageRecord::default();
        let check = check_answer(
            &problem.statement,
            answer,
            &problem.ground_truth,
            ctx.backends,
            ctx.catalog,
            &mut delta,
        )
        .await;
        correct = Some(check.correct);
        episode.trace.push(EventKind::AnswerCheck {
            answer: answer.clone(),
            ground_truth: problem.ground_truth.clone(),
            correct: check.correct,
            method: check.method,
            judge_replies: check.judge_replies.into_iter().map(RecordedReply::from).collect(),
            error: check.error,
        });
        if !delta.is_empty() {
            episode.charge("answer_check", delta);
        }
    }

    EpisodeResult {
        problem_id: problem.id.clone(),
        episode_id: episode_id.to_string(),
        final_answer,
        correct,
        termination,
        usage: episode.usage,
        trace: episode.trace,
    }
}

/// Chat double that plays back recorded turns, errors included.
struct Playback {
    turns: Mutex<VecDeque<Result<ChatReply, String>>>,
    model: String,
}

#[async_trait]
impl ChatBackend for Playback {
    async fn chat(&self, _request: &ChatRequest) -> Result<ChatReply, BackendError> {
        match self.turns.lock().unwrap().pop_front() {
            Some(Ok(r)) => Ok(r),
            Some(Err(e)) => Err(BackendError::Replayed(e)),
            None => Err(BackendError::ScriptExhausted {
                backend: self.model.clone(),
                calls: 0,
            }),
        }
    }

    fn model(&self) -> &str {
        &self.model
    }
}

/// Verifier double returning recorded verdicts in order.
struct RecordedVerdicts(Mutex<VecDeque<VerificationVerdict>>);

#[async_trait]
impl StepVerifier for RecordedVerdicts {
    async fn verify(&self, step: &ProofStep, _config: &VerifierConfig) -> VerificationVerdict {
        self.0
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| malformed_verdict(format!("no recorded verdict for step {}", step.step_id)))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("trace has no start event")]
    NoStart,
    #[error("trace ends in a time limit, which cannot be replayed")]
    TimeLimited,
}

/// Re-runs an episode against playback doubles built from its own trace.
pub async fn replay(trace: &EpisodeTrace, catalog: &Catalog) -> Result<EpisodeResult, ReplayError> {
    let mut start = None;
    let mut reasoner = VecDeque::new();
    let mut judge = VecDeque::new();
    let mut verdicts = VecDeque::new();
    let mut pending_step = false;
    for e in &trace.events {
        match &e.kind {
            EventKind::Started {
                episode_id,
                problem,
                config,
            } => start = Some((episode_id.clone(), problem.clone(), config.clone())),
            EventKind::Reply { reply } => reasoner.push_back(Ok(ChatReply::from(reply.clone()))),
            EventKind::ReplyError { error } => reasoner.push_back(Err(error.clone())),
            EventKind::ToolCall { step, .. } => pending_step = step.is_some(),
            EventKind::Verdict { verdict, .. } if pending_step => {
                verdicts.push_back(verdict.clone());
                pending_step = false;
            }
            EventKind::AnswerCheck {
                judge_replies, error, ..
            } => {
                judge.extend(judge_replies.iter().cloned().map(|r| Ok(ChatReply::from(r))));
                if let Some(err) = error {
                    judge.push_back(Err(err.clone()));
                }
            }
            EventKind::Terminated {
                reason: TerminationReason::TimeLimit,
                ..
            } => return Err(ReplayError::TimeLimited),
            _ => {}
        }
    }
    let (episode_id, problem, config) = start.ok_or(ReplayError::NoStart)?;
    let backends = Backends::new()
        .with_chat(
            Role::Reasoner,
            ChatProfile::new(std::sync::Arc::new(Playback {
                turns: Mutex::new(reasoner),
                model: "replay-reasoner".into(),
            }))
            .with_retry(RetryPolicy::none()),
        )
        .with_chat(
            Role::Judge,
            ChatProfile::new(std::sync::Arc::new(Playback {
                turns: Mutex::new(judge),
                model: "replay-judge".into(),
            }))
            .with_retry(RetryPolicy::none()),
        );
    let verifier = RecordedVerdicts(Mutex::new(verdicts));
    let ctx = AgentContext {
        backends: &backends,
        verifier: &verifier,
        catalog,
    };
    Ok(run_episode(&problem, &episode_id, &config, &ctx).await)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn last_boxed_wins() {
        assert_eq!(extract_final_answer("so \\boxed{42}").as_deref(), Some("42"));
        assert_eq!(extract_final_answer("\\boxed{1} then \\boxed{\\frac{1}{2}}").as_deref(), Some("\\frac{1}{2}"));
        assert_eq!(extract_final_answer("no answer here"), None);
        assert_eq!(extract_final_answer("\\boxed{unclosed"), None);
    }

    #[test]
    fn canonical_forms() {
        assert_eq!(canonicalize(" $4$ "), "4");
        assert_eq!(canonicalize("\\boxed{ 4 }"), "4");
        assert_eq!(canonicalize("\\( x + 1 \\)."), "x+1");
        assert_eq!(canonicalize("Yes"), "yes");
        assert_eq!(canonicalize("\\boxed{1}+\\boxed{2}"), "\\boxed{1}+\\boxed{2}");
    }

    #[test]
    fn rendered_results_start_with_label() {
        for label in VerdictLabel::ALL {
            let mut v = malformed_verdict(String::new());
            v.label = label;
            let text = render_tool_result(&v);
            assert!(text.starts_with(label.token()), "{text}");
            assert_eq!(text.lines().count(), 1);
        }
    }

    #[test]
    fn proof_step_argument_parsing() {
        assert_eq!(proof_step_argument(r#"{"proof_step": "x"}"#, "proof_step").unwrap(), "x");
        assert!(proof_step_argument("{", "proof_step").is_err());
        assert!(proof_step_argument(r#"{"other": 1}"#, "proof_step").is_err());
    }
}
