mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use common::rig::*;
use hermes_core::backends::scripted::ScriptItem;
use hermes_core::backends::Role;
use hermes_core::prover::{JobStatus, Polarity, VerdictLabel, VerifierConfig};
use hermes_core::translator::ProofStep;

const STEP: &str = "Since 2 + 2 = 4, the first two terms sum to 4.";

fn step() -> ProofStep {
    ProofStep::new("ep", 1, STEP)
}

struct Setup {
    prover: Arc<hermes_core::backends::scripted::ScriptedChat>,
    verifier: hermes_core::prover::Verifier,
}

fn setup(prover_items: Vec<ScriptItem>, k_p: u32) -> Setup {
    setup_with(good_translation("2 + 2 = 4"), prover_items, k_p)
}

fn setup_with(translation: ScriptItem, prover_items: Vec<ScriptItem>, k_p: u32) -> Setup {
    let prover = scripted("goedel-prover", prover_items);
    let auto = scripted("goedel-formalizer", vec![translation]);
    let b = backends(None, Some(auto), Some(prover.clone()), Arc::new(judge(true)));
    let sched = stub_scheduler(2 * k_p as usize, Duration::from_secs(10));
    Setup {
        prover,
        verifier: verifier(b, sched),
    }
}

#[tokio::test]
async fn goal_proof_wins_and_negation_jobs_are_cancelled() {
    let s = setup(
        vec![
            failing_prover_reply(),
            prover_reply("sleep 10"),
            prover_reply("hang"),
            prover_reply("hang"),
        ],
        2,
    );
    let started = Instant::now();
    let v = s.verifier.verify_step(&step(), &model_only(1, 2)).await;
    assert_eq!(v.label, VerdictLabel::Correct, "{}", v.evidence);
    assert!(started.elapsed() < Duration::from_secs(5));
    assert!(v.evidence.contains("@stub sleep 10"));
    let neg: Vec<_> = v.jobs.iter().filter(|j| j.polarity == Polarity::Negation).collect();
    assert_eq!(neg.len(), 2);
    assert!(neg.iter().all(|j| j.status == JobStatus::Cancelled), "{:?}", v.jobs);
    assert_eq!(s.prover.calls(), 4);
    assert!(v.memory_entry.is_some());
}

#[tokio::test]
async fn negation_proof_gives_incorrect() {
    let s = setup(
        vec![
            prover_reply("hang"),
            prover_reply("hang"),
            prover_reply("sleep 10"),
            failing_prover_reply(),
        ],
        2,
    );
    let v = s.verifier.verify_step(&step(), &model_only(1, 2)).await;
    assert_eq!(v.label, VerdictLabel::Incorrect, "{}", v.evidence);
    let goal_jobs: Vec<_> = v.jobs.iter().filter(|j| j.polarity == Polarity::Goal).collect();
    assert!(goal_jobs.iter().all(|j| j.status == JobStatus::Cancelled), "{:?}", v.jobs);
    // The counter-proof is of the negated statement.
    assert!(v.evidence.contains("¬ (2 + 2 = 4)"), "{}", v.evidence);
    assert!(v.memory_entry.is_none());
    assert!(s.verifier.memory.is_empty());
}

#[tokio::test]
async fn nothing_proves_means_failure_and_full_sampling() {
    for k_p in 1..=3u32 {
        let s = setup((0..2 * k_p).map(|_| failing_prover_reply()).collect(), k_p);
        let v = s.verifier.verify_step(&step(), &model_only(1, k_p)).await;
        assert_eq!(v.label, VerdictLabel::VerificationFailure);
        assert_eq!(s.prover.calls(), 2 * k_p as usize);
        assert_eq!(v.jobs.len(), 2 * k_p as usize);
    }
}

#[tokio::test]
async fn builtin_wave_skips_the_prover_model() {
    let s = setup_with(true_translation("2 + 2 = 4"), Vec::new(), 4);
    let v = s.verifier.verify_step(&step(), &VerifierConfig::default()).await;
    assert_eq!(v.label, VerdictLabel::Correct, "{}", v.evidence);
    assert_eq!(s.prover.calls(), 0);
    assert!(v.jobs.iter().all(|j| j.tag.contains("builtin")));
}

#[tokio::test]
async fn builtin_wave_refutes_false_claims() {
    let s = setup_with(false_translation("2 + 2 = 5"), Vec::new(), 4);
    let v = s.verifier.verify_step(&step(), &VerifierConfig::default()).await;
    assert_eq!(v.label, VerdictLabel::Incorrect, "{}", v.evidence);
    assert!(v.evidence.contains("¬ (2 + 2 = 5)"));
    assert_eq!(s.prover.calls(), 0);
}

#[tokio::test]
async fn prover_model_can_be_disabled() {
    let s = setup(Vec::new(), 2);
    let mut c = model_only(1, 2);
    c.use_prover_model = false;
    let v = s.verifier.verify_step(&step(), &c).await;
    assert_eq!(v.label, VerdictLabel::VerificationFailure);
    assert_eq!(s.prover.calls(), 0);
    assert!(v.jobs.is_empty());
}

#[tokio::test]
async fn both_polarities_proved_is_flagged() {
    let s = setup(vec![prover_reply("sleep 30"), prover_reply("sleep 30")], 1);
    let v = s.verifier.verify_step(&step(), &model_only(1, 1)).await;
    assert!(matches!(v.label, VerdictLabel::Correct | VerdictLabel::Incorrect));
    let proved = v.jobs.iter().filter(|j| j.status == JobStatus::Proved).count();
    if proved == 2 {
        assert!(v.notes.iter().any(|n| n.contains("negation")), "{:?}", v.notes);
    }
}

#[tokio::test]
async fn instructional_text_is_not_verified() {
    let s = setup(Vec::new(), 1);
    let v = s
        .verifier
        .verify_step(&ProofStep::new("ep", 1, "Let me restate the problem."), &model_only(1, 1))
        .await;
    assert_eq!(v.label, VerdictLabel::NoVerification);
    assert!(v.statement.is_none());
    assert_eq!(v.usage.tokens(Role::Autoformalizer), 0);
}

#[tokio::test]
async fn judge_can_veto_formalization() {
    let prover = scripted("p", Vec::new());
    let auto = scripted("a", Vec::new());
    let judge = FnChat::new("judge", |_| Ok("False".into()));
    let b = backends(None, Some(auto.clone()), Some(prover), Arc::new(judge));
    let v = verifier(b, stub_scheduler(2, Duration::from_secs(10)))
        .verify_step(&step(), &model_only(1, 1))
        .await;
    assert_eq!(v.label, VerdictLabel::NoVerification);
    assert_eq!(auto.calls(), 0);
}

#[tokio::test]
async fn translation_exhaustion_is_verification_failure() {
    let auto = scripted("a", vec![broken_translation(), broken_translation()]);
    let b = backends(None, Some(auto.clone()), Some(scripted("p", Vec::new())), Arc::new(judge(true)));
    let v = verifier(b, stub_scheduler(2, Duration::from_secs(10)))
        .verify_step(&step(), &model_only(2, 1))
        .await;
    assert_eq!(v.label, VerdictLabel::VerificationFailure);
    assert!(v.evidence.contains("2 attempts did not compile"), "{}", v.evidence);
    assert_eq!(auto.calls(), 2);
}

#[tokio::test]
async fn backend_outage_is_reported_not_raised() {
    let auto = scripted("a", vec![ScriptItem::transport_error("connection refused")]);
    let b = backends(None, Some(auto), Some(scripted("p", Vec::new())), Arc::new(judge(true)));
    let v = verifier(b, stub_scheduler(2, Duration::from_secs(10)))
        .verify_step(&step(), &model_only(1, 1))
        .await;
    assert_eq!(v.label, VerdictLabel::VerificationFailure);
    assert!(v.evidence.starts_with("verification error"), "{}", v.evidence);
}

#[tokio::test]
async fn second_step_sees_first_as_hypothesis() {
    let auto = scripted(
        "goedel-formalizer",
        vec![true_translation("2 + 2 = 4"), true_translation("2 + 2 + 1 = 5")],
    );
    let b = backends(None, Some(auto.clone()), Some(scripted("p", Vec::new())), Arc::new(judge(true)));
    let v = verifier(b, stub_scheduler(2, Duration::from_secs(10)));
    let c = VerifierConfig::default();
    let first = v.verify_step(&step(), &c).await;
    assert_eq!(first.label, VerdictLabel::Correct);
    let second = v
        .verify_step(&ProofStep::new("ep", 2, "Adding 1 to the sum 2 + 2 = 4 gives 5."), &c)
        .await;
    assert_eq!(second.label, VerdictLabel::Correct);
    let stmt = second.statement.unwrap();
    assert!(stmt.body.contains("(h_mem_1 : 2 + 2 = 4)"), "{}", stmt.body);
    assert_eq!(stmt.injected_hypotheses, vec![first.memory_entry.unwrap()]);
    assert_eq!(v.memory.episode_len("ep"), 2);
    // The autoformalizer prompt mentions the earlier fact too.
    let prompt = &auto.requests()[1].messages[0].content;
    assert!(prompt.contains(STEP), "{prompt}");
}
