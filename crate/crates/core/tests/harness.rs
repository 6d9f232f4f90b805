mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use common::agent::*;
use common::rig::*;
use hermes_core::agent::EpisodeConfig;
use hermes_core::backends::scripted::ScriptItem;
use hermes_core::backends::{ChatBackend, Role};
use hermes_core::harness::dataset::{parse_dataset, ProblemInstance};
use hermes_core::harness::flops::ModelCostConfig;
use hermes_core::harness::report::{parse_structured, render, ReportFormat};
use hermes_core::harness::{load_run, majority_vote, trace_path, EvalError, Evaluator, Strategy, RECORDS_FILE};
use hermes_core::prompts::Catalog;
use hermes_core::prover::{StepVerifier, VerdictLabel};
use hermes_core::trace::EpisodeTrace;

fn evaluator(reasoner: Arc<dyn ChatBackend>, verifier: Arc<dyn StepVerifier>) -> Evaluator {
    Evaluator {
        backends: backends(Some(reasoner), None, None, Arc::new(judge(false))),
        verifier,
        catalog: Arc::new(Catalog::builtin().clone()),
        episode: EpisodeConfig::default(),
        costs: BTreeMap::from([(
            Role::Reasoner,
            ModelCostConfig {
                n_params: 1000,
                n_layer: 2,
                n_ctx: 8,
                d_attn: 4,
            },
        )]),
        parallelism: 2,
        config_snapshot: serde_json::json!({ "test": true }),
    }
}

fn dataset() -> Vec<ProblemInstance> {
    vec![
        problem("a", "What is 1 + 1?", "2"),
        problem("b", "What is 2 + 2?", "4"),
        problem("c", "What is 3 + 3?", "6"),
        problem("d", "What is 4 + 4?", "8"),
    ]
}

/// Reasoner that answers each question from a table, so call order does not
/// matter.
fn answering(answers: &'static [(&'static str, &'static str)]) -> Arc<dyn ChatBackend> {
    Arc::new(FnChat::new("reasoner", move |r| {
        let q = last(r);
        let a = answers.iter().find(|(k, _)| q.contains(k)).map(|(_, a)| *a).unwrap_or("0");
        Ok(format!("Adding gives \\boxed{{{a}}}."))
    }))
}

const PLANTED: &[(&str, &str)] = &[("1 + 1", "2"), ("2 + 2", "4"), ("3 + 3", "7"), ("4 + 4", "$8$")];

#[tokio::test]
async fn zero_shot_baseline_makes_no_tool_calls() {
    let e = evaluator(answering(PLANTED), Arc::new(FixedVerdicts::new(&[])));
    let report = e.evaluate(&dataset(), Strategy::ZsCot, None).await.unwrap();
    let a = &report.aggregates;
    assert_eq!(a.tool_calls, 0);
    assert_eq!(a.accuracy, 0.75);
    assert_eq!((a.correct, a.problems), (3, 4));
    assert!(a.verdicts.is_empty());
    // Records keep dataset order whatever order episodes finished in.
    let ids: Vec<_> = report.records.iter().map(|r| r.problem_id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "c", "d"]);
    let reasoner_tokens: u64 = report.records.iter().map(|r| r.usage.tokens(Role::Reasoner)).sum();
    assert_eq!(a.total_tokens[&Role::Reasoner], reasoner_tokens);
    assert_eq!(a.flops.per_role[&Role::Reasoner], 2128 * reasoner_tokens as u128);
}

#[tokio::test]
async fn majority_votes_over_canonical_answers() {
    // Samples: 7, 6, $6$, 7, \boxed{6}: "6" wins three to two.
    let items = ["7", "6", "$6$", "7", "6"]
        .iter()
        .map(|a| ScriptItem::content(format!("\\boxed{{{a}}}")))
        .collect();
    let chat = scripted("reasoner", items);
    let e = evaluator(chat.clone(), Arc::new(FixedVerdicts::new(&[])));
    let p = [problem("c", "What is 3 + 3?", "6")];
    let report = e.evaluate(&p, Strategy::Majority(5), None).await.unwrap();
    let r = &report.records[0];
    assert_eq!(r.final_answer.as_deref(), Some("6"));
    assert_eq!(r.correct, Some(true));
    assert_eq!(r.episodes.len(), 5);
    assert_eq!(r.tool_calls, 0);
    let seeds: Vec<_> = chat.requests().iter().map(|q| q.sampling.seed).collect();
    assert_eq!(seeds, [Some(0), Some(1), Some(2), Some(3), Some(4)]);
    assert!(chat.requests().iter().all(|q| q.tools.is_empty()));
}

#[tokio::test]
async fn majority_tie_goes_to_first_seen() {
    let items = ["9", "7", "7", "9"]
        .iter()
        .map(|a| ScriptItem::content(format!("\\boxed{{{a}}}")))
        .collect();
    let e = evaluator(scripted("reasoner", items), Arc::new(FixedVerdicts::new(&[])));
    let report = e
        .evaluate(&[problem("c", "What is 3 + 3?", "6")], Strategy::Majority(4), None)
        .await
        .unwrap();
    assert_eq!(report.records[0].final_answer.as_deref(), Some("9"));
    assert_eq!(report.records[0].correct, Some(false));
    assert_eq!(majority_vote(&[]), None);
}

#[tokio::test]
async fn majority_of_one_matches_the_single_answer() {
    let single = evaluator(answering(PLANTED), Arc::new(FixedVerdicts::new(&[])))
        .evaluate(&dataset(), Strategy::ZsCot, None)
        .await
        .unwrap();
    let voted = evaluator(answering(PLANTED), Arc::new(FixedVerdicts::new(&[])))
        .evaluate(&dataset(), Strategy::Majority(1), None)
        .await
        .unwrap();
    let c = |r: &hermes_core::harness::report::RunReport| r.records.iter().map(|x| x.correct).collect::<Vec<_>>();
    assert_eq!(c(&single), c(&voted));
}

#[tokio::test]
async fn resumed_run_matches_uninterrupted_run() {
    let full_dir = tempfile::tempdir().unwrap();
    let full = evaluator(answering(PLANTED), Arc::new(FixedVerdicts::new(&[])))
        .evaluate(&dataset(), Strategy::ZsCot, Some(full_dir.path()))
        .await
        .unwrap();

    let dir = tempfile::tempdir().unwrap();
    evaluator(answering(PLANTED), Arc::new(FixedVerdicts::new(&[])))
        .evaluate(&dataset()[..2], Strategy::ZsCot, Some(dir.path()))
        .await
        .unwrap();
    // A crash mid-write leaves a torn line behind.
    let records = dir.path().join(RECORDS_FILE);
    let mut text = std::fs::read_to_string(&records).unwrap();
    text.push_str("{\"problem_id\": \"c\", \"strat");
    std::fs::write(&records, text).unwrap();

    let chat = Arc::new(FnChat::new("reasoner", |r| {
        let q = last(r);
        assert!(!q.contains("1 + 1") && !q.contains("2 + 2"), "finished problem re-run: {q}");
        let a = if q.contains("3 + 3") { "7" } else { "$8$" };
        Ok(format!("Adding gives \\boxed{{{a}}}."))
    }));
    let resumed = evaluator(chat.clone(), Arc::new(FixedVerdicts::new(&[])))
        .evaluate(&dataset(), Strategy::ZsCot, Some(dir.path()))
        .await
        .unwrap();
    assert_eq!(chat.calls(), 2);
    assert_eq!(resumed.aggregates, full.aggregates);
    assert_eq!(std::fs::read_to_string(&records).unwrap().lines().count(), 4);
    assert_eq!(load_run(dir.path(), &BTreeMap::new()).unwrap().aggregates, full.aggregates);
}

#[tokio::test]
async fn run_directory_rejects_another_strategy() {
    let dir = tempfile::tempdir().unwrap();
    evaluator(answering(PLANTED), Arc::new(FixedVerdicts::new(&[])))
        .evaluate(&dataset()[..1], Strategy::ZsCot, Some(dir.path()))
        .await
        .unwrap();
    let err = evaluator(answering(PLANTED), Arc::new(FixedVerdicts::new(&[])))
        .evaluate(&dataset(), Strategy::Majority(3), Some(dir.path()))
        .await
        .unwrap_err();
    assert!(matches!(err, EvalError::StrategyMismatch { .. }));
}

#[tokio::test]
async fn verdict_histogram_counts_every_tool_call() {
    let mut items = Vec::new();
    for _ in 0..2 {
        items.push(ScriptItem::proof_step_call(TOOL, "1 + 1 = 2"));
        items.push(ScriptItem::proof_step_call(TOOL, "2 + 2 = 5"));
        items.push(ScriptItem::content("\\boxed{2}"));
    }
    let verdicts = [
        VerdictLabel::Correct,
        VerdictLabel::Incorrect,
        VerdictLabel::Correct,
        VerdictLabel::NoVerification,
    ];
    let mut e = evaluator(scripted("reasoner", items), Arc::new(FixedVerdicts::new(&verdicts)));
    e.parallelism = 1;
    let dir = tempfile::tempdir().unwrap();
    let p = [problem("a", "What is 1 + 1?", "2"), problem("b", "What is 2 - 0?", "2")];
    let report = e.evaluate(&p, Strategy::Hermes, Some(dir.path())).await.unwrap();
    let a = &report.aggregates;
    assert_eq!(a.tool_calls, 4);
    assert_eq!(a.verdicts.values().sum::<u64>(), a.tool_calls);
    assert_eq!(a.verdicts[&VerdictLabel::Correct], 2);
    assert_eq!(a.accuracy, 1.0);

    // Every episode has a trace on disk whose counts agree with the record.
    for r in &report.records {
        let t = EpisodeTrace::read(&trace_path(dir.path(), &r.episodes[0].episode_id)).unwrap();
        assert_eq!(t.tool_calls() as u64, r.tool_calls);
        assert_eq!(t.usage(), r.usage);
    }
    let table = render(a, ReportFormat::Table);
    assert!(table.contains("VERIFICATION FAILURE"), "{table}");
    assert_eq!(parse_structured(&render(a, ReportFormat::Structured)).unwrap(), *a);
}

#[test]
fn dataset_errors_carry_line_numbers() {
    let text = "{\"id\": 1, \"problem\": \"p\", \"answer\": 2}\nnot json\n{\"id\": \"1\", \"problem\": \"q\", \"answer\": \"3\"}\n";
    let err = parse_dataset(text, "t", false).unwrap_err().to_string();
    assert!(err.starts_with("line 2"), "{err}");
    let d = parse_dataset(text, "t", true).unwrap();
    // Line 3 repeats id 1 and is skipped too.
    assert_eq!(d.problems.len(), 1);
    assert_eq!(d.skipped.iter().map(|(l, _)| *l).collect::<Vec<_>>(), [2, 3]);
    assert_eq!(d.problems[0].ground_truth, "2");
}
