#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::Duration;

use hermes_core::lean::{stub::LOG_ENV, CheckerConfig};

pub fn stub_path() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_hermes-lean-stub"))
}

pub fn stub_config(log: Option<&Path>) -> CheckerConfig {
    let mut c = CheckerConfig::new(stub_path(), std::env::temp_dir());
    c.default_timeout = Duration::from_secs(10);
    c.startup_timeout = Duration::from_secs(10);
    if let Some(log) = log {
        c.env.push((LOG_ENV.to_string(), log.display().to_string()));
    }
    c
}

/// Replays a stub event log and returns the peak number of requests in flight.
pub fn peak_in_flight(log: &Path) -> usize {
    let text = std::fs::read_to_string(log).unwrap_or_default();
    let mut in_flight = std::collections::HashSet::new();
    let mut peak = 0;
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        let (Some(kind), Some(pid)) = (parts.next(), parts.next()) else {
            continue;
        };
        match kind {
            "begin" => {
                in_flight.insert(pid.to_string());
            }
            "end" | "term" | "crash" => {
                in_flight.remove(pid);
            }
            _ => {}
        }
        peak = peak.max(in_flight.len());
    }
    peak
}

pub fn log_events(log: &Path, kind: &str) -> usize {
    std::fs::read_to_string(log)
        .unwrap_or_default()
        .lines()
        .filter(|l| l.split_whitespace().next() == Some(kind))
        .count()
}

pub mod rig {
    use std::sync::Arc;
    use std::time::Duration;

    use async_trait::async_trait;
    use hermes_core::backends::hashing::HashingEmbedder;
    use hermes_core::backends::scripted::{ScriptItem, ScriptedChat};
    use hermes_core::backends::{
        BackendError, Backends, ChatBackend, ChatProfile, ChatReply, ChatRequest, RetryPolicy, Role,
    };
    use hermes_core::memory::MemoryStore;
    use hermes_core::prompts::Catalog;
    use hermes_core::prover::{Verifier, VerifierConfig};
    use hermes_core::scheduler::{Scheduler, SchedulerConfig};
    use hermes_core::translator::TranslationBudget;

    type Responder = dyn Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync;

    /// Chat double that answers from the newest message instead of a fixed order.
    pub struct FnChat {
        name: String,
        respond: Box<Responder>,
        calls: std::sync::atomic::AtomicUsize,
    }

    impl FnChat {
        pub fn new(
            name: &str,
            respond: impl Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync + 'static,
        ) -> Self {
            Self {
                name: name.into(),
                respond: Box::new(respond),
                calls: Default::default(),
            }
        }

        pub fn calls(&self) -> usize {
            self.calls.load(std::sync::atomic::Ordering::SeqCst)
        }
    }

    #[async_trait]
    impl ChatBackend for FnChat {
        async fn chat(&self, request: &ChatRequest) -> Result<ChatReply, BackendError> {
            self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(ChatReply {
                content: (self.respond)(request)?,
                tool_calls: Vec::new(),
                usage: None,
            })
        }

        fn model(&self) -> &str {
            &self.name
        }
    }

    pub fn last(request: &ChatRequest) -> &str {
        request.messages.last().map(|m| m.content.as_str()).unwrap_or("")
    }

    /// Judge that accepts every step and every translation, and grades answers
    /// by `answer_ok`.
    pub fn judge(answer_ok: bool) -> FnChat {
        FnChat::new("judge", move |r| {
            let text = last(r);
            Ok(if text.contains("Translate the following Lean 4 theorem") {
                "The claim stated in the theorem.".into()
            } else if text.contains("Ground Truth:") {
                if answer_ok { "True" } else { "False" }.into()
            } else {
                "True".into()
            })
        })
    }

    /// Same, but every equivalence question is answered False.
    pub fn skeptical_judge() -> FnChat {
        FnChat::new("judge", |r| {
            let text = last(r);
            Ok(if text.contains("Translate the following Lean 4 theorem") {
                "Something else entirely.".into()
            } else if text.contains("Statement B:") {
                "False".into()
            } else {
                "True".into()
            })
        })
    }

    pub fn lean(code: &str) -> String {
        format!("Here is the formalization.\n```lean4\n{code}\n```")
    }

    /// Autoformalizer reply that compiles.
    pub fn good_translation(goal: &str) -> ScriptItem {
        ScriptItem::content(lean(&format!("theorem test : {goal} := by sorry")))
    }

    /// Compiling translation of a true claim: the stub refutes every attempt
    /// at its negation.
    pub fn true_translation(goal: &str) -> ScriptItem {
        ScriptItem::content(lean(&format!(
            "-- @stub when _neg: error linarith failed\ntheorem test : {goal} := by sorry"
        )))
    }

    /// Compiling translation of a false claim: only its negation goes through.
    pub fn false_translation(goal: &str) -> ScriptItem {
        ScriptItem::content(lean(&format!(
            "-- @stub unless _neg: unless sorry: error linarith failed\ntheorem test : {goal} := by sorry"
        )))
    }

    /// Autoformalizer reply the stub rejects at compile time.
    pub fn broken_translation() -> ScriptItem {
        ScriptItem::content(lean("-- @stub error unknown identifier 'foo'\ntheorem test : foo = 1 := by sorry"))
    }

    /// Prover reply whose proof finishes after `directive` (a stub directive
    /// such as `sleep 10` or `hang`).
    pub fn prover_reply(directive: &str) -> ScriptItem {
        ScriptItem::content(lean(&format!("theorem test : True := by\n  -- @stub {directive}\n  trivial")))
    }

    /// Prover reply that leaves a hole, so it never proves.
    pub fn failing_prover_reply() -> ScriptItem {
        ScriptItem::content(lean("theorem test : True := by\n  sorry"))
    }

    pub fn scripted(name: &str, items: Vec<ScriptItem>) -> Arc<ScriptedChat> {
        Arc::new(ScriptedChat::new(name, items))
    }

    pub fn profile(chat: Arc<dyn ChatBackend>) -> ChatProfile {
        ChatProfile::new(chat).with_retry(RetryPolicy::none())
    }

    pub fn backends(
        reasoner: Option<Arc<dyn ChatBackend>>,
        autoformalizer: Option<Arc<dyn ChatBackend>>,
        prover: Option<Arc<dyn ChatBackend>>,
        judge: Arc<dyn ChatBackend>,
    ) -> Backends {
        let mut b = Backends::new()
            .with_chat(Role::Judge, profile(judge))
            .with_embedder(Arc::new(HashingEmbedder::new(64)), RetryPolicy::none());
        for (role, chat) in [
            (Role::Reasoner, reasoner),
            (Role::Autoformalizer, autoformalizer),
            (Role::Prover, prover),
        ] {
            if let Some(c) = chat {
                b = b.with_chat(role, profile(c));
            }
        }
        b
    }

    pub fn stub_scheduler(workers: usize, timeout: Duration) -> Arc<Scheduler> {
        let mut checker = super::stub_config(None);
        checker.default_timeout = timeout;
        Scheduler::new(
            checker,
            SchedulerConfig {
                workers,
                max_respawns: 3,
                default_timeout: timeout,
            },
        )
    }

    pub fn verifier(backends: Backends, scheduler: Arc<Scheduler>) -> Verifier {
        Verifier {
            backends,
            scheduler,
            catalog: Arc::new(Catalog::builtin().clone()),
            memory: Arc::new(MemoryStore::new()),
        }
    }

    /// Verifier settings with the built-in tactic wave switched off so the
    /// scripted prover replies decide the race.
    pub fn model_only(k_t: u32, k_p: u32) -> VerifierConfig {
        let mut c = VerifierConfig::default();
        c.translation = TranslationBudget { k_t };
        c.prover.k_p = k_p;
        c.prover.builtin_tactics.clear();
        c.check_timeout = Duration::from_secs(10);
        c
    }
}

pub mod agent {
    use std::collections::VecDeque;
    use std::sync::Mutex;

    use async_trait::async_trait;
    use hermes_core::backends::scripted::{ScriptItem, ScriptReply};
    use hermes_core::backends::{ToolCall, UsageRecord};
    use hermes_core::harness::dataset::ProblemInstance;
    use hermes_core::prover::{StepVerifier, VerdictLabel, VerificationVerdict, VerifierConfig};
    use hermes_core::translator::ProofStep;

    pub const TOOL: &str = "verify_one_mathematical_step";

    pub fn problem(id: &str, statement: &str, answer: &str) -> ProblemInstance {
        ProblemInstance {
            id: id.into(),
            statement: statement.into(),
            ground_truth: answer.into(),
            subject: None,
            source_dataset: "test".into(),
        }
    }

    /// Assistant turn with visible reasoning and one tool call.
    pub fn thinking_call(content: &str, id: &str, step: &str) -> ScriptItem {
        ScriptItem {
            expect: None,
            reply: ScriptReply::Turn {
                content: content.into(),
                tool_calls: vec![ToolCall {
                    id: id.into(),
                    name: TOOL.into(),
                    arguments: serde_json::json!({ "proof_step": step }).to_string(),
                }],
            },
            usage: None,
        }
    }

    /// Verifier double returning fixed labels in order, then NO_VERIFICATION.
    pub struct FixedVerdicts {
        labels: Mutex<VecDeque<VerdictLabel>>,
        pub seen: Mutex<Vec<ProofStep>>,
    }

    impl FixedVerdicts {
        pub fn new(labels: &[VerdictLabel]) -> Self {
            Self {
                labels: Mutex::new(labels.iter().copied().collect()),
                seen: Mutex::new(Vec::new()),
            }
        }
    }

    #[async_trait]
    impl StepVerifier for FixedVerdicts {
        async fn verify(&self, step: &ProofStep, _config: &VerifierConfig) -> VerificationVerdict {
            self.seen.lock().unwrap().push(step.clone());
            let label = self.labels.lock().unwrap().pop_front().unwrap_or(VerdictLabel::NoVerification);
            VerificationVerdict {
                label,
                evidence: format!("fixed {}", label.token()),
                statement: None,
                usage: UsageRecord::default(),
                translation_attempts: 0,
                jobs: Vec::new(),
                memory_entry: None,
                notes: Vec::new(),
            }
        }
    }
}
