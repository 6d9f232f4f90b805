//! Natural-language step to formal statement, with compile and
//! backtranslation checks.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Backends, ChatMessage, Role, UsageRecord};
use crate::formal::{extract_lean_code, FormalError, FormalStatement};
use crate::memory::{MemoryEntry, INJECTED_PREFIX};
use crate::prompts::{ask_true_false, fill, Catalog};
use crate::scheduler::{JobOutcome, Scheduler, SchedulerError, VerificationJob};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofStep {
    pub step_id: String,
    pub text: String,
    pub episode_id: String,
    pub index: u32,
}

impl ProofStep {
    pub fn new(episode_id: &str, index: u32, text: impl Into<String>) -> Self {
        Self {
            step_id: format!("{episode_id}/{index}"),
            text: text.into(),
            episode_id: episode_id.to_string(),
            index,
        }
    }

    /// Lean identifier used for the accepted statement.
    pub fn theorem_name(&self) -> String {
        format!("step_{}", self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationBudget {
    pub k_t: u32,
}

impl Default for TranslationBudget {
    fn default() -> Self {
        Self { k_t: 4 }
    }
}

/// Why a single attempt was rejected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttemptDiagnosis {
    /// No usable declaration in the reply.
    Unparseable { detail: String },
    CompileFailed { detail: String },
    NotEquivalent { backtranslation: String },
}

impl AttemptDiagnosis {
    pub fn is_compile_failure(&self) -> bool {
        !matches!(self, AttemptDiagnosis::NotEquivalent { .. })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationFailure {
    pub compile_failed: u32,
    pub not_equivalent: u32,
    pub attempts: Vec<AttemptDiagnosis>,
}

impl TranslationFailure {
    fn push(&mut self, d: AttemptDiagnosis) {
        if d.is_compile_failure() {
            self.compile_failed += 1;
        } else {
            self.not_equivalent += 1;
        }
        self.attempts.push(d);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Translated {
    Accepted {
        statement: FormalStatement,
        attempts: u32,
    },
    Failed(TranslationFailure),
}

#[derive(Debug, Error)]
pub enum TranslateError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
}

/// Adds one `(h_mem_i : P)` binder per context entry, in rank order, before
/// the goal.
pub fn inject_hypotheses(candidate: &FormalStatement, context: &[MemoryEntry]) -> Result<FormalStatement, FormalError> {
    if context.is_empty() {
        return Ok(candidate.clone());
    }
    let mut parts = candidate.parts()?;
    let mut binders = parts.binders.clone();
    for (i, entry) in context.iter().enumerate() {
        if !binders.is_empty() {
            binders.push(' ');
        }
        binders.push_str(&format!(
            "({INJECTED_PREFIX}{} : {})",
            i + 1,
            entry.formal_proposition.closed()
        ));
    }
    parts.binders = binders;
    let mut out = candidate.clone();
    out.body = parts.render();
    out.injected_hypotheses = context.iter().map(|e| e.entry_id).collect();
    Ok(out)
}

/// Step text as given to the autoformalizer, followed by the memory context.
pub fn autoformalizer_question(step: &ProofStep, context: &[MemoryEntry]) -> String {
    if context.is_empty() {
        return step.text.clone();
    }
    let mut q = step.text.clone();
    q.push_str("\n\nPreviously verified facts that may be used as hypotheses:");
    for e in context {
        q.push_str(&format!("\n- {} (Lean: {})", e.step_text, e.formal_proposition.closed()));
    }
    q
}

pub struct Translator<'a> {
    pub backends: &'a Backends,
    pub scheduler: &'a Arc<Scheduler>,
    pub catalog: &'a Catalog,
    pub check_timeout: Duration,
}

impl Translator<'_> {
    pub async fn formalize_step(
        &self,
        step: &ProofStep,
        context: &[MemoryEntry],
        budget: TranslationBudget,
        usage: &mut UsageRecord,
    ) -> Result<Translated, TranslateError> {
        let model = self.backends.model_name(Role::Autoformalizer).unwrap_or_default();
        let prompt = fill(
            &self.catalog.autoformalizer.for_model(&model).template,
            &[("question", &autoformalizer_question(step, context))],
        );
        let mut failure = TranslationFailure::default();
        for attempt in 0..budget.k_t {
            let reply = self
                .backends
                .chat(Role::Autoformalizer, vec![ChatMessage::user(prompt.clone())], &[], Some(attempt as u64))
                .await?;
            usage.merge(&reply.usage);
            let candidate = extract_lean_code(&reply.reply.content)
                .ok_or(FormalError::NoCode)
                .and_then(|code| FormalStatement::from_code(&code, &step.step_id))
                .and_then(|s| inject_hypotheses(&s, context));
            let candidate = match candidate {
                Ok(c) => c,
                Err(e) => {
                    failure.push(AttemptDiagnosis::Unparseable { detail: e.to_string() });
                    continue;
                }
            };
            if let Some(detail) = self.compile_failure(&candidate, attempt, usage).await? {
                failure.push(AttemptDiagnosis::CompileFailed { detail });
                continue;
            }
            let back = self.backtranslate(&candidate, usage).await?;
            let equivalent = !back.trim().is_empty() && self.judge_equivalence(&step.text, &back, usage).await?;
            if !equivalent {
                failure.push(AttemptDiagnosis::NotEquivalent { backtranslation: back });
                continue;
            }
            let mut statement = candidate.renamed(&step.theorem_name()).unwrap_or(candidate);
            statement.backtranslation = Some(back);
            return Ok(Translated::Accepted {
                statement,
                attempts: attempt + 1,
            });
        }
        Ok(Translated::Failed(failure))
    }

    async fn compile_failure(
        &self,
        candidate: &FormalStatement,
        attempt: u32,
        usage: &mut UsageRecord,
    ) -> Result<Option<String>, TranslateError> {
        let result = self
            .scheduler
            .run_one(VerificationJob {
                id: 0,
                source: candidate.source(),
                timeout: self.check_timeout,
                tag: format!("compile-{}", attempt + 1),
            })
            .await?;
        Ok(match result.outcome {
            JobOutcome::Finished { outcome } => {
                usage.merge(&UsageRecord::checker_time(Duration::from_secs_f64(outcome.report.elapsed)));
                let report = outcome.report;
                if report.timed_out {
                    Some("compile check timed out".into())
                } else if let Some(e) = report.first_error() {
                    Some(e.to_string())
                } else if report.compiles() {
                    None
                } else {
                    Some("does not compile".into())
                }
            }
            JobOutcome::Crashed { detail } => Some(format!("checker crashed: {detail}")),
            JobOutcome::Cancelled => Some("compile check cancelled".into()),
        })
    }

    /// Informal rendering of the statement, recorded by the caller.
    pub async fn backtranslate(&self, statement: &FormalStatement, usage: &mut UsageRecord) -> Result<String, TranslateError> {
        let prompt = fill(
            &self.catalog.backtranslate.template,
            &[("header", &statement.header), ("body", &statement.body)],
        );
        let r = self
            .backends
            .chat(Role::Judge, vec![ChatMessage::user(prompt)], &[], None)
            .await?;
        usage.merge(&r.usage);
        Ok(r.reply.content.trim().to_string())
    }

    /// Strict True/False equivalence question; anything unparseable after one
    /// re-ask is `false`.
    pub async fn judge_equivalence(
        &self,
        original: &str,
        backtranslated: &str,
        usage: &mut UsageRecord,
    ) -> Result<bool, TranslateError> {
        let prompt = fill(
            &self.catalog.equivalence.template,
            &[("original", original), ("backtranslation", backtranslated)],
        );
        let j = ask_true_false(self.backends, Role::Judge, &prompt, &self.catalog.reask, usage).await?;
        Ok(j.answer == Some(true))
    }
}
