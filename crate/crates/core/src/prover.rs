//! Goal/negation proving and the per-step verification pipeline.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Backends, ChatMessage, Role, UsageRecord};
use crate::formal::{extract_proof, FormalError, FormalStatement};
use crate::memory::{EntryId, FormalProposition, MemoryStore, NewEntry, RetrievalRequest};
use crate::prompts::{ask_true_false, fill, Catalog};
use crate::lean::ProofStatus;
use crate::scheduler::{JobOutcome, JobResult, Race, Scheduler, SchedulerError, VerificationJob};
use crate::translator::{ProofStep, Translated, TranslationBudget, TranslationFailure, Translator};

/// Single sweep over stock decision procedures and normalizers.
pub const DEFAULT_BUILTIN_TACTIC: &str =
    "first\n    | decide\n    | (norm_num; done)\n    | (simp; done)\n    | omega\n    | linarith\n    | nlinarith\n    | positivity";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProverBudget {
    /// Prover-model samples per polarity.
    pub k_p: u32,
    /// Tactic scripts (without the leading `by`) tried before any model
    /// sample.
    pub builtin_tactics: Vec<String>,
}

impl Default for ProverBudget {
    fn default() -> Self {
        Self {
            k_p: 4,
            builtin_tactics: vec![DEFAULT_BUILTIN_TACTIC.to_string()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Goal,
    Negation,
}

impl Polarity {
    fn short(self) -> &'static str {
        match self {
            Polarity::Goal => "goal",
            Polarity::Negation => "neg",
        }
    }
}

#[derive(Debug, Error)]
#[error("goal cannot be isolated for negation: {0}")]
pub struct NegationUnsupported(#[from] FormalError);

/// `G` becomes `¬ (G)` with binders untouched; the name gains `_neg`.
pub fn negate_goal(statement: &FormalStatement) -> Result<FormalStatement, NegationUnsupported> {
    let goal = statement.goal()?;
    Ok(statement.with_goal(&format!("¬ ({goal})"), &format!("{}_neg", statement.theorem_name))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Proved,
    Failed,
    TimedOut,
    Cancelled,
    Crashed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub job_id: u64,
    pub tag: String,
    pub polarity: Polarity,
    pub status: JobStatus,
    /// Checker seconds, zero for jobs that never ran to completion.
    pub elapsed: f64,
}

impl JobSummary {
    fn of(result: &JobResult, polarity: Polarity) -> Self {
        let (status, elapsed) = match &result.outcome {
            JobOutcome::Finished { outcome } => (
                match outcome.status {
                    ProofStatus::Proved => JobStatus::Proved,
                    ProofStatus::Failed => JobStatus::Failed,
                    ProofStatus::TimedOut => JobStatus::TimedOut,
                },
                outcome.report.elapsed,
            ),
            JobOutcome::Cancelled => (JobStatus::Cancelled, 0.0),
            JobOutcome::Crashed { .. } => (JobStatus::Crashed, 0.0),
        };
        Self {
            job_id: result.job_id,
            tag: result.tag.clone(),
            polarity,
            status,
            elapsed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaceResult {
    Goal,
    Negation,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinningProof {
    pub polarity: Polarity,
    pub tag: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProveReport {
    pub winner: Option<WinningProof>,
    pub jobs: Vec<JobSummary>,
    pub prover_calls: u32,
    /// A job of the losing polarity also proved before cancellation.
    pub inconsistent: bool,
}

impl ProveReport {
    pub fn race(&self) -> RaceResult {
        match self.winner.as_ref().map(|w| w.polarity) {
            Some(Polarity::Goal) => RaceResult::Goal,
            Some(Polarity::Negation) => RaceResult::Negation,
            None => RaceResult::Inconclusive,
        }
    }
}

#[derive(Debug, Error)]
pub enum ProveError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
}

struct PlannedJob {
    polarity: Polarity,
    tag: String,
    source: String,
}

pub struct Prover<'a> {
    pub backends: &'a Backends,
    pub scheduler: &'a Arc<Scheduler>,
    pub catalog: &'a Catalog,
    pub check_timeout: Duration,
}

impl Prover<'_> {
    /// Races proofs of the goal against proofs of its negation. Built-in
    /// tactics run first; prover-model samples (`k_p` per polarity) follow
    /// only when that wave is inconclusive and `use_model` is set.
    pub async fn prove(
        &self,
        statement: &FormalStatement,
        budget: &ProverBudget,
        use_model: bool,
        usage: &mut UsageRecord,
        notes: &mut Vec<String>,
    ) -> Result<ProveReport, ProveError> {
        let negation = match negate_goal(statement) {
            Ok(n) => Some(n),
            Err(e) => {
                notes.push(format!("{e}; proving the goal only"));
                None
            }
        };
        let targets: Vec<(Polarity, &FormalStatement)> = std::iter::once((Polarity::Goal, statement))
            .chain(negation.as_ref().map(|n| (Polarity::Negation, n)))
            .collect();

        let mut report = ProveReport {
            winner: None,
            jobs: Vec::new(),
            prover_calls: 0,
            inconsistent: false,
        };

        let mut wave = Vec::new();
        for (i, tactic) in budget.builtin_tactics.iter().enumerate() {
            for &(polarity, target) in &targets {
                if let Ok(source) = target.with_proof(&format!("by\n  {tactic}")) {
                    wave.push(PlannedJob {
                        polarity,
                        tag: format!("{}-builtin-{}", polarity.short(), i + 1),
                        source,
                    });
                }
            }
        }
        self.run_wave(wave, &mut report, usage).await?;
        if report.winner.is_some() || !use_model {
            return Ok(report);
        }

        let model = self.backends.model_name(Role::Prover).unwrap_or_default();
        let template = &self.catalog.prover.for_model(&model).template;
        let header = join_header(&self.scheduler.checker().startup_header, &statement.header);
        let mut per_polarity: Vec<Vec<PlannedJob>> = Vec::new();
        for &(polarity, target) in &targets {
            let prompt = fill(template, &[("header", &header), ("body", &target.body)]);
            let mut planned = Vec::new();
            for sample in 0..budget.k_p {
                let reply = self
                    .backends
                    .chat(Role::Prover, vec![ChatMessage::user(prompt.clone())], &[], Some(sample as u64))
                    .await?;
                report.prover_calls += 1;
                usage.merge(&reply.usage);
                let tag = format!("{}-sample-{}", polarity.short(), sample + 1);
                match extract_proof(&reply.reply.content).map(|p| target.with_proof(&p)) {
                    Some(Ok(source)) => planned.push(PlannedJob { polarity, tag, source }),
                    _ => notes.push(format!("{tag}: no proof in prover reply")),
                }
            }
            per_polarity.push(planned);
        }
        let mut interleaved = Vec::new();
        let mut iters: Vec<_> = per_polarity.into_iter().map(|v| v.into_iter()).collect();
        loop {
            let before = interleaved.len();
            for it in iters.iter_mut() {
                interleaved.extend(it.next());
            }
            if interleaved.len() == before {
                break;
            }
        }
        self.run_wave(interleaved, &mut report, usage).await?;
        Ok(report)
    }

    async fn run_wave(
        &self,
        planned: Vec<PlannedJob>,
        report: &mut ProveReport,
        usage: &mut UsageRecord,
    ) -> Result<(), ProveError> {
        if planned.is_empty() {
            return Ok(());
        }
        let first_id = report.jobs.len() as u64;
        let jobs = planned
            .iter()
            .enumerate()
            .map(|(i, p)| VerificationJob {
                id: first_id + i as u64,
                source: p.source.clone(),
                timeout: self.check_timeout,
                tag: p.tag.clone(),
            })
            .collect();
        let mut batch = self.scheduler.submit_batch(jobs, self.scheduler.config().workers).await?;
        let race = batch.await_first_conclusive(JobResult::proved).await;
        batch.cancel();
        let mut results = batch.join().await;
        results.sort_by_key(|r| r.job_id);
        let plan = |id: u64| &planned[(id - first_id) as usize];
        if let Race::Winner(w) = race {
            let p = plan(w.job_id);
            report.winner = Some(WinningProof {
                polarity: p.polarity,
                tag: p.tag.clone(),
                source: p.source.clone(),
            });
            report.inconsistent = results
                .iter()
                .any(|r| r.proved() && plan(r.job_id).polarity != p.polarity);
        }
        for r in &results {
            let summary = JobSummary::of(r, plan(r.job_id).polarity);
            usage.merge(&UsageRecord::checker_time(Duration::from_secs_f64(summary.elapsed)));
            report.jobs.push(summary);
        }
        Ok(())
    }
}

fn join_header(startup: &str, own: &str) -> String {
    match (startup.trim().is_empty(), own.trim().is_empty()) {
        (_, true) => startup.to_string(),
        (true, false) => own.to_string(),
        (false, false) => format!("{startup}\n{own}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VerdictLabel {
    Correct,
    Incorrect,
    VerificationFailure,
    NoVerification,
}

impl VerdictLabel {
    pub const ALL: [VerdictLabel; 4] = [
        VerdictLabel::Correct,
        VerdictLabel::Incorrect,
        VerdictLabel::VerificationFailure,
        VerdictLabel::NoVerification,
    ];

    /// Label token as shown to the reasoning model.
    pub fn token(self) -> &'static str {
        match self {
            VerdictLabel::Correct => "CORRECT",
            VerdictLabel::Incorrect => "INCORRECT",
            VerdictLabel::VerificationFailure => "VERIFICATION FAILURE",
            VerdictLabel::NoVerification => "NO VERIFICATION",
        }
    }
}

impl std::fmt::Display for VerdictLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreenResult {
    Mathematical,
    NonMathematical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationResult {
    Ok,
    Failed,
}

/// The verdict table. The race outcome is irrelevant once an earlier stage
/// has decided.
pub fn verdict_for(screen: ScreenResult, translation: TranslationResult, race: RaceResult) -> VerdictLabel {
    match (screen, translation, race) {
        (ScreenResult::NonMathematical, _, _) => VerdictLabel::NoVerification,
        (_, TranslationResult::Failed, _) => VerdictLabel::VerificationFailure,
        (_, _, RaceResult::Goal) => VerdictLabel::Correct,
        (_, _, RaceResult::Negation) => VerdictLabel::Incorrect,
        (_, _, RaceResult::Inconclusive) => VerdictLabel::VerificationFailure,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationVerdict {
    pub label: VerdictLabel,
    /// Winning proof, counter-proof, or a failure diagnosis.
    pub evidence: String,
    pub statement: Option<FormalStatement>,
    pub usage: UsageRecord,
    #[serde(default)]
    pub translation_attempts: u32,
    #[serde(default)]
    pub jobs: Vec<JobSummary>,
    #[serde(default)]
    pub memory_entry: Option<EntryId>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl VerificationVerdict {
    fn new(label: VerdictLabel, evidence: impl Into<String>) -> Self {
        Self {
            label,
            evidence: evidence.into(),
            statement: None,
            usage: UsageRecord::default(),
            translation_attempts: 0,
            jobs: Vec::new(),
            memory_entry: None,
            notes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifierConfig {
    pub translation: TranslationBudget,
    pub prover: ProverBudget,
    pub memory_k: usize,
    pub use_memory: bool,
    pub use_prover_model: bool,
    /// Ask the judge whether rule-passing steps are formalizable.
    pub prescreen_judge: bool,
    #[serde(with = "crate::lean::secs")]
    pub check_timeout: Duration,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            translation: TranslationBudget::default(),
            prover: ProverBudget::default(),
            memory_k: 3,
            use_memory: true,
            use_prover_model: true,
            prescreen_judge: true,
            check_timeout: Duration::from_secs(60),
        }
    }
}

const MATH_SYMBOLS: &[char] = &[
    '=', '<', '>', '+', '*', '/', '^', '≤', '≥', '≠', '∑', '∏', '∫', '√', '∀', '∃', '∈', '∣', '≡', '|', '!',
    '\\', 'π', '∞',
];

const MATH_WORDS: &[&str] = &[
    "integer", "integers", "prime", "primes", "divisible", "divides", "divisor", "equation", "function",
    "sum", "product", "real", "reals", "rational", "number", "numbers", "triangle", "polynomial", "root",
    "roots", "even", "odd", "square", "cube", "angle", "circle", "matrix", "vector", "derivative",
    "integral", "limit", "sequence", "series", "set", "modulo", "factorial", "greater", "less", "equal",
    "equals", "positive", "negative", "zero", "one", "two", "three", "ten", "hundred", "inequality",
    "multiple", "fraction", "digit", "digits", "area", "volume", "probability", "log", "sine", "cosine",
];

/// Cheap rule layer: `Some(reason)` when the text is certainly not a
/// formalizable mathematical claim.
pub fn rule_screen(text: &str) -> Option<&'static str> {
    let t = text.trim();
    if t.is_empty() {
        return Some("empty step");
    }
    if t.chars().any(|c| c.is_ascii_digit() || MATH_SYMBOLS.contains(&c)) {
        return None;
    }
    let words: Vec<String> = t
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    if words.iter().any(|w| MATH_WORDS.contains(&w.as_str())) {
        return None;
    }
    let single_letter_var = t
        .split(|c: char| !c.is_alphanumeric())
        .any(|w| w.chars().count() == 1 && w != "a" && w != "A" && w != "I" && w.chars().all(char::is_alphabetic));
    if single_letter_var {
        return None;
    }
    Some("no mathematical content")
}

#[async_trait]
pub trait StepVerifier: Send + Sync {
    async fn verify(&self, step: &ProofStep, config: &VerifierConfig) -> VerificationVerdict;
}

/// The full pipeline: pre-screen, retrieval, translation, proving, memory.
pub struct Verifier {
    pub backends: Backends,
    pub scheduler: Arc<Scheduler>,
    pub catalog: Arc<Catalog>,
    pub memory: Arc<MemoryStore>,
}

#[derive(Debug, Error)]
enum PipelineError {
    #[error("{0}")]
    Backend(#[from] BackendError),
    #[error("{0}")]
    Scheduler(#[from] SchedulerError),
    #[error("memory: {0}")]
    Memory(#[from] crate::memory::MemoryError),
    #[error("{0}")]
    Formal(#[from] FormalError),
}

impl From<crate::translator::TranslateError> for PipelineError {
    fn from(e: crate::translator::TranslateError) -> Self {
        match e {
            crate::translator::TranslateError::Backend(b) => PipelineError::Backend(b),
            crate::translator::TranslateError::Scheduler(s) => PipelineError::Scheduler(s),
        }
    }
}

impl From<ProveError> for PipelineError {
    fn from(e: ProveError) -> Self {
        match e {
            ProveError::Backend(b) => PipelineError::Backend(b),
            ProveError::Scheduler(s) => PipelineError::Scheduler(s),
        }
    }
}

impl Verifier {
    pub async fn verify_step(&self, step: &ProofStep, config: &VerifierConfig) -> VerificationVerdict {
        let mut verdict = VerificationVerdict::new(VerdictLabel::VerificationFailure, "");
        let mut usage = UsageRecord::default();
        if let Err(e) = self.pipeline(step, config, &mut verdict, &mut usage).await {
            verdict.label = VerdictLabel::VerificationFailure;
            verdict.evidence = format!("verification error: {e}");
        }
        verdict.usage = usage;
        verdict
    }

    async fn screen(&self, step: &ProofStep, config: &VerifierConfig, usage: &mut UsageRecord) -> Result<Option<String>, PipelineError> {
        if let Some(reason) = rule_screen(&step.text) {
            return Ok(Some(reason.to_string()));
        }
        if !config.prescreen_judge {
            return Ok(None);
        }
        let prompt = fill(&self.catalog.prescreen.template, &[("step", &step.text)]);
        let j = ask_true_false(&self.backends, Role::Judge, &prompt, &self.catalog.reask, usage).await?;
        Ok((j.answer == Some(false)).then(|| "judged not formalizable".to_string()))
    }

    async fn pipeline(
        &self,
        step: &ProofStep,
        config: &VerifierConfig,
        verdict: &mut VerificationVerdict,
        usage: &mut UsageRecord,
    ) -> Result<(), PipelineError> {
        if let Some(reason) = self.screen(step, config, usage).await? {
            verdict.label = verdict_for(ScreenResult::NonMathematical, TranslationResult::Failed, RaceResult::Inconclusive);
            verdict.evidence = reason;
            return Ok(());
        }

        let retrieved = if config.use_memory {
            let r = self
                .memory
                .retrieve(
                    &self.backends,
                    &RetrievalRequest {
                        query_text: step.text.clone(),
                        k: config.memory_k,
                        episode_id: Some(step.episode_id.clone()),
                    },
                )
                .await?;
            usage.merge(&r.usage);
            Some(r)
        } else {
            None
        };
        let context = retrieved.as_ref().map(|r| r.entries.as_slice()).unwrap_or(&[]);

        let translator = Translator {
            backends: &self.backends,
            scheduler: &self.scheduler,
            catalog: &self.catalog,
            check_timeout: config.check_timeout,
        };
        let statement = match translator.formalize_step(step, context, config.translation, usage).await? {
            Translated::Accepted { statement, attempts } => {
                verdict.translation_attempts = attempts;
                statement
            }
            Translated::Failed(failure) => {
                verdict.translation_attempts = config.translation.k_t;
                verdict.label = verdict_for(ScreenResult::Mathematical, TranslationResult::Failed, RaceResult::Inconclusive);
                verdict.evidence = describe_failure(&failure);
                return Ok(());
            }
        };

        let prover = Prover {
            backends: &self.backends,
            scheduler: &self.scheduler,
            catalog: &self.catalog,
            check_timeout: config.check_timeout,
        };
        let report = prover
            .prove(&statement, &config.prover, config.use_prover_model, usage, &mut verdict.notes)
            .await?;
        if report.inconsistent {
            verdict
                .notes
                .push("both the goal and its negation were proved; the formalization is likely degenerate".into());
        }
        verdict.jobs = report.jobs.clone();
        verdict.label = verdict_for(ScreenResult::Mathematical, TranslationResult::Ok, report.race());
        verdict.evidence = match &report.winner {
            Some(w) => w.source.clone(),
            None => format!("no proof or counter-proof among {} checker jobs", report.jobs.len()),
        };
        if verdict.label == VerdictLabel::Correct {
            if let Some(r) = &retrieved {
                let proposition = FormalProposition::from_statement(&statement)?;
                verdict.memory_entry = Some(self.memory.record(NewEntry {
                    episode_id: step.episode_id.clone(),
                    step_text: step.text.clone(),
                    formal_proposition: proposition,
                    embedding: r.query.clone(),
                })?);
            }
        }
        verdict.statement = Some(statement);
        Ok(())
    }
}

fn describe_failure(f: &TranslationFailure) -> String {
    format!(
        "no faithful translation: {} attempts did not compile, {} were not equivalent",
        f.compile_failed, f.not_equivalent
    )
}

#[async_trait]
impl StepVerifier for Verifier {
    async fn verify(&self, step: &ProofStep, config: &VerifierConfig) -> VerificationVerdict {
        self.verify_step(step, config).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negation_wraps_goal() {
        let s = FormalStatement::from_code("theorem test (n : ℕ) (h : n > 0) : P n := by sorry", "e/1").unwrap();
        let n = negate_goal(&s).unwrap();
        assert_eq!(n.body, "theorem test_neg (n : ℕ) (h : n > 0) : ¬ (P n) := by sorry");
        assert_eq!(n.theorem_name, "test_neg");
        let s = FormalStatement::from_code("theorem t : ¬ Q := by sorry", "e/1").unwrap();
        assert_eq!(negate_goal(&s).unwrap().goal().unwrap(), "¬ (¬ Q)");
        let s = FormalStatement::from_code("theorem t : 1 + 1 = 3 := by sorry", "e/1").unwrap();
        assert_eq!(negate_goal(&s).unwrap().goal().unwrap(), "¬ (1 + 1 = 3)");
    }

    #[test]
    fn rule_screen_examples() {
        assert!(rule_screen("Let me restate the problem").is_some());
        assert!(rule_screen("   ").is_some());
        assert!(rule_screen("Now we simplify things a bit").is_some());
        assert!(rule_screen("2 + 2 = 4").is_none());
        assert!(rule_screen("the sum of two even integers is even").is_none());
        assert!(rule_screen("since x is positive, so is x squared").is_none());
    }

    #[test]
    fn labels_render_with_spaces() {
        assert_eq!(VerdictLabel::VerificationFailure.token(), "VERIFICATION FAILURE");
        assert_eq!(
            serde_json::to_string(&VerdictLabel::NoVerification).unwrap(),
            "\"NO_VERIFICATION\""
        );
    }
}
