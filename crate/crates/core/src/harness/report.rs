//! Run reports: per-problem records, aggregates and their renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::flops::{estimate_flops, FlopEstimate, ModelCostConfig};
use crate::backends::{Role, UsageRecord};
use crate::prover::VerdictLabel;
use crate::trace::TerminationReason;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode_id: String,
    pub final_answer: Option<String>,
    pub termination: TerminationReason,
    pub tool_calls: u64,
    #[serde(default)]
    pub trace_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub problem_id: String,
    pub strategy: String,
    #[serde(default)]
    pub subject: Option<String>,
    pub final_answer: Option<String>,
    pub correct: Option<bool>,
    pub episodes: Vec<EpisodeSummary>,
    pub usage: UsageRecord,
    pub tool_calls: u64,
    pub verdicts: BTreeMap<VerdictLabel, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub strategy: String,
    pub problems: u64,
    pub correct: u64,
    /// Problems without a gradeable answer; they count as incorrect.
    pub unknown: u64,
    pub accuracy: f64,
    pub total_tokens: BTreeMap<Role, u64>,
    pub avg_tokens_per_problem: BTreeMap<Role, f64>,
    pub checker_seconds: f64,
    pub tool_calls: u64,
    pub verdicts: BTreeMap<VerdictLabel, u64>,
    pub flops: FlopEstimate,
}

impl Aggregates {
    pub fn compute(strategy: &str, records: &[ProblemRecord], costs: &BTreeMap<Role, ModelCostConfig>) -> Self {
        let problems = records.len() as u64;
        let correct = records.iter().filter(|r| r.correct == Some(true)).count() as u64;
        let unknown = records.iter().filter(|r| r.correct.is_none()).count() as u64;
        let usage: UsageRecord = records.iter().map(|r| r.usage.clone()).sum();
        let mut total_tokens = BTreeMap::new();
        let mut avg = BTreeMap::new();
        for role in Role::ALL {
            let t = usage.tokens(role);
            if t > 0 {
                total_tokens.insert(role, t);
                avg.insert(role, t as f64 / problems as f64);
            }
        }
        let mut verdicts = BTreeMap::new();
        for r in records {
            for (label, n) in &r.verdicts {
                *verdicts.entry(*label).or_insert(0) += n;
            }
        }
        Self {
            strategy: strategy.to_string(),
            problems,
            correct,
            unknown,
            accuracy: if problems == 0 { 0.0 } else { correct as f64 / problems as f64 },
            total_tokens,
            avg_tokens_per_problem: avg,
            checker_seconds: usage.checker_seconds(),
            tool_calls: records.iter().map(|r| r.tool_calls).sum(),
            verdicts,
            flops: estimate_flops(costs, &usage),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: String,
    pub config: serde_json::Value,
    pub records: Vec<ProblemRecord>,
    pub aggregates: Aggregates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Structured,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "structured" | "json" => Ok(ReportFormat::Structured),
            other => Err(format!("unknown report format `{other}` (table, structured)")),
        }
    }
}

pub fn render(aggregates: &Aggregates, format: ReportFormat) -> String {
    match format {
        ReportFormat::Structured => serde_json::to_string_pretty(aggregates).expect("aggregates serialize"),
        ReportFormat::Table => render_table(aggregates),
    }
}

/// Inverse of the structured rendering.
pub fn parse_structured(text: &str) -> Result<Aggregates, serde_json::Error> {
    serde_json::from_str(text)
}

fn render_table(a: &Aggregates) -> String {
    let mut out = String::new();
    if a.problems == 0 {
        let _ = writeln!(out, "{}: 0 problems, nothing to report", a.strategy);
        return out;
    }
    let _ = writeln!(out, "strategy    {}", a.strategy);
    let _ = writeln!(
        out,
        "accuracy    {:.4}  ({} / {} correct, {} without a gradeable answer)",
        a.accuracy, a.correct, a.problems, a.unknown
    );
    let _ = writeln!(out, "tool calls  {}", a.tool_calls);
    let _ = writeln!(out, "checker     {:.1} s", a.checker_seconds);
    if !a.verdicts.is_empty() {
        let _ = writeln!(out, "verdicts");
        for label in VerdictLabel::ALL {
            let _ = writeln!(out, "  {:<22}{}", label.token(), a.verdicts.get(&label).copied().unwrap_or(0));
        }
    }
    let _ = writeln!(out, "{:<16}{:>14}{:>14}{:>24}", "role", "avg tokens", "tokens", "FLOPs");
    for (role, total) in &a.total_tokens {
        let flops = a
            .flops
            .per_role
            .get(role)
            .map(|f| f.to_string())
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<16}{:>14.1}{:>14}{:>24}",
            role.as_str(),
            a.avg_tokens_per_problem[role],
            total,
            flops
        );
    }
    let _ = writeln!(out, "total FLOPs {}", a.flops.total);
    if !a.flops.unconfigured.is_empty() {
        let roles: Vec<_> = a.flops.unconfigured.iter().map(|r| r.as_str()).collect();
        let _ = writeln!(out, "no cost model for: {}", roles.join(", "));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, correct: Option<bool>, reasoner_tokens: u64) -> ProblemRecord {
        ProblemRecord {
            problem_id: id.into(),
            strategy: "hermes@1".into(),
            subject: None,
            final_answer: correct.map(|_| "1".into()),
            correct,
            episodes: Vec::new(),
            usage: UsageRecord::for_call(Role::Reasoner, reasoner_tokens, 0, false),
            tool_calls: 2,
            verdicts: BTreeMap::from([(VerdictLabel::Correct, 1), (VerdictLabel::Incorrect, 1)]),
        }
    }

    #[test]
    fn averages_per_problem() {
        let a = Aggregates::compute(
            "hermes@1",
            &[record("a", Some(true), 100), record("b", None, 300)],
            &BTreeMap::new(),
        );
        assert_eq!(a.avg_tokens_per_problem[&Role::Reasoner], 200.0);
        assert_eq!(a.accuracy, 0.5);
        assert_eq!(a.unknown, 1);
        assert_eq!(a.tool_calls, a.verdicts.values().sum::<u64>());
        assert_eq!(a.flops.unconfigured, vec![Role::Reasoner]);
    }

    #[test]
    fn empty_run_has_banner() {
        let a = Aggregates::compute("zscot@1", &[], &BTreeMap::new());
        assert_eq!(a.accuracy, 0.0);
        assert!(render(&a, ReportFormat::Table).contains("0 problems"));
    }

    #[test]
    fn structured_round_trip() {
        let costs = BTreeMap::from([(
            Role::Reasoner,
            ModelCostConfig {
                n_params: 7_000_000_000,
                n_layer: 32,
                n_ctx: 8192,
                d_attn: 4096,
            },
        )]);
        let a = Aggregates::compute("hermes@1", &[record("a", Some(true), 123), record("b", Some(false), 7)], &costs);
        let back = parse_structured(&render(&a, ReportFormat::Structured)).unwrap();
        assert_eq!(back, a);
        assert!(render(&a, ReportFormat::Table).contains("accuracy    0.5000"));
    }
}
