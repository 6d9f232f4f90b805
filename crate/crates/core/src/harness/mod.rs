//! Benchmark evaluation: strategies, voting, resumable runs.

pub mod dataset;
pub mod flops;
pub mod report;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use thiserror::Error;

use crate::agent::{canonicalize, check_answer, run_episode, AgentContext, EpisodeConfig, EpisodeResult};
use crate::backends::{Backends, Role, UsageRecord};
use crate::prompts::Catalog;
use crate::prover::StepVerifier;
use dataset::ProblemInstance;
use flops::ModelCostConfig;
use report::{Aggregates, EpisodeSummary, ProblemRecord, RunReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Hermes,
    ZsCot,
    Majority(u32),
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Hermes => f.write_str("hermes@1"),
            Strategy::ZsCot => f.write_str("zscot@1"),
            Strategy::Majority(n) => write!(f, "majority@{n}"),
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, n) = match s.split_once('@') {
            Some((name, n)) => (name, Some(n.parse::<u32>().map_err(|_| format!("bad sample count in `{s}`"))?)),
            None => (s, None),
        };
        match (name, n) {
            ("hermes", None | Some(1)) => Ok(Strategy::Hermes),
            ("zscot", None | Some(1)) => Ok(Strategy::ZsCot),
            ("majority", Some(n)) if n >= 1 => Ok(Strategy::Majority(n)),
            ("majority", None) => Err("majority needs a sample count, e.g. majority@5".into()),
            _ => Err(format!("unknown strategy `{s}` (hermes@1, zscot@1, majority@N)")),
        }
    }
}

/// Most frequent answer; ties go to the answer seen first.
pub fn majority_vote(answers: &[String]) -> Option<String> {
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    for (i, a) in answers.iter().enumerate() {
        counts.entry(a.as_str()).or_insert((0, i)).0 += 1;
    }
    counts
        .into_iter()
        .max_by(|(_, (ca, fa)), (_, (cb, fb))| ca.cmp(cb).then(fb.cmp(fa)))
        .map(|(a, _)| a.to_string())
}

/// Picks one of N candidate episodes, e.g. with an external reward model.
pub trait TraceScorer {
    fn select(&self, candidates: &[EpisodeResult]) -> usize;
}

pub fn best_of_n<'a>(candidates: &'a [EpisodeResult], scorer: &dyn TraceScorer) -> Option<&'a EpisodeResult> {
    if candidates.is_empty() {
        return None;
    }
    candidates.get(scorer.select(candidates))
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("run directory {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("run directory holds results for strategy {found}, not {requested}")]
    StrategyMismatch { found: String, requested: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub const RECORDS_FILE: &str = "episodes.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const TRACES_DIR: &str = "traces";

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

pub struct Evaluator {
    pub backends: Backends,
    pub verifier: Arc<dyn StepVerifier>,
    pub catalog: Arc<Catalog>,
    pub episode: EpisodeConfig,
    pub costs: BTreeMap<Role, ModelCostConfig>,
    /// Problems evaluated concurrently.
    pub parallelism: usize,
    pub config_snapshot: serde_json::Value,
}

impl Evaluator {
    fn ctx(&self) -> AgentContext<'_> {
        AgentContext {
            backends: &self.backends,
            verifier: self.verifier.as_ref(),
            catalog: &self.catalog,
        }
    }

    fn persist_trace(&self, result: &EpisodeResult, run_dir: Option<&Path>) -> Option<String> {
        let dir = run_dir?;
        let rel = format!("{TRACES_DIR}/{}.jsonl", file_safe(&result.episode_id));
        match result.trace.write(&dir.join(&rel)) {
            Ok(()) => Some(rel),
            Err(e) => {
                tracing::warn!(episode = %result.episode_id, "could not write trace: {e}");
                None
            }
        }
    }

    fn summary(&self, result: &EpisodeResult, run_dir: Option<&Path>) -> EpisodeSummary {
        EpisodeSummary {
            episode_id: result.episode_id.clone(),
            final_answer: result.final_answer.clone(),
            termination: result.termination,
            tool_calls: result.tool_calls() as u64,
            trace_file: self.persist_trace(result, run_dir),
        }
    }

    /// Runs one problem under `strategy`.
    pub async fn solve(&self, problem: &ProblemInstance, strategy: Strategy, run_dir: Option<&Path>) -> ProblemRecord {
        let ctx = self.ctx();
        let mut record = ProblemRecord {
            problem_id: problem.id.clone(),
            strategy: strategy.to_string(),
            subject: problem.subject.clone(),
            final_answer: None,
            correct: None,
            episodes: Vec::new(),
            usage: UsageRecord::default(),
            tool_calls: 0,
            verdicts: BTreeMap::new(),
        };
        let absorb = |record: &mut ProblemRecord, r: &EpisodeResult| {
            record.usage.merge(&r.usage);
            record.tool_calls += r.tool_calls() as u64;
            for label in r.verdicts() {
                *record.verdicts.entry(label).or_insert(0) += 1;
            }
        };
        match strategy {
            Strategy::Hermes | Strategy::ZsCot => {
                let config = EpisodeConfig {
                    tool_enabled: strategy == Strategy::Hermes,
                    check_answer: true,
                    ..self.episode.clone()
                };
                let r = run_episode(problem, &problem.id, &config, &ctx).await;
                absorb(&mut record, &r);
                record.final_answer = r.final_answer.clone();
                record.correct = r.correct;
                record.episodes.push(self.summary(&r, run_dir));
            }
            Strategy::Majority(n) => {
                let mut answers: Vec<String> = Vec::new();
                for i in 0..n {
                    let config = EpisodeConfig {
                        tool_enabled: false,
                        check_answer: false,
                        seed: Some(i as u64),
                        ..self.episode.clone()
                    };
                    let r = run_episode(problem, &format!("{}#{}", problem.id, i + 1), &config, &ctx).await;
                    absorb(&mut record, &r);
                    answers.extend(r.final_answer.clone());
                    record.episodes.push(self.summary(&r, run_dir));
                }
                let canonical: Vec<String> = answers.iter().map(|a| canonicalize(a)).collect();
                if let Some(winner) = majority_vote(&canonical) {
                    let original = answers[canonical.iter().position(|c| *c == winner).unwrap()].clone();
                    let mut delta = UsageRecord::default();
                    let check = check_answer(
                        &problem.statement,
                        &original,
                        &problem.ground_truth,
                        &self.backends,
                        &self.catalog,
                        &mut delta,
                    )
                    .await;
                    record.usage.merge(&delta);
                    record.final_answer = Some(original);
                    record.correct = Some(check.correct);
                }
            }
        }
        record
    }

    /// Evaluates `problems`, skipping any already recorded in `run_dir`.
    /// Each finished problem is appended to the run directory before the
    /// next result is awaited, so an interrupted run resumes where it
    /// stopped.
    pub async fn evaluate(
        &self,
        problems: &[ProblemInstance],
        strategy: Strategy,
        run_dir: Option<&Path>,
    ) -> Result<RunReport, EvalError> {
        let mut done: HashMap<String, ProblemRecord> = HashMap::new();
        let mut sink = None;
        if let Some(dir) = run_dir {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join(RECORDS_FILE);
            for r in read_records(&path)? {
                if r.strategy != strategy.to_string() {
                    return Err(EvalError::StrategyMismatch {
                        found: r.strategy,
                        requested: strategy.to_string(),
                    });
                }
                done.insert(r.problem_id.clone(), r);
            }
            // Rewrite so a torn final line from an interrupted run is dropped.
            let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
            for p in problems {
                if let Some(r) = done.get(&p.id) {
                    writeln!(f, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io_err(&path))?;
                }
            }
            sink = Some((path, f));
        }

        let pending: Vec<&ProblemInstance> = problems.iter().filter(|p| !done.contains_key(&p.id)).collect();
        let mut results = stream::iter(pending)
            .map(|p| self.solve(p, strategy, run_dir))
            .buffer_unordered(self.parallelism.max(1));
        while let Some(record) = results.next().await {
            if let Some((path, f)) = sink.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&record).expect("record serializes")).map_err(io_err(path))?;
                f.flush().map_err(io_err(path))?;
            }
            done.insert(record.problem_id.clone(), record);
        }

        let records: Vec<ProblemRecord> = problems.iter().filter_map(|p| done.remove(&p.id)).collect();
        let report = RunReport {
            strategy: strategy.to_string(),
            config: self.config_snapshot.clone(),
            aggregates: Aggregates::compute(&strategy.to_string(), &records, &self.costs),
            records,
        };
        if let Some(dir) = run_dir {
            write_report(dir, &report)?;
        }
        Ok(report)
    }
}

fn read_records(path: &Path) -> Result<Vec<ProblemRecord>, EvalError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    Ok(text
        .lines()
        .filter_map(|l| serde_json::from_str::<ProblemRecord>(l).ok())
        .collect())
}

pub fn write_report(dir: &Path, report: &RunReport) -> Result<(), EvalError> {
    let path = dir.join(REPORT_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(report).expect("report serializes")).map_err(io_err(&path))
}

/// Loads `report.json` from a run directory, or rebuilds aggregates from the
/// per-problem records of a partial run.
pub fn load_run(dir: &Path, costs: &BTreeMap<Role, ModelCostConfig>) -> Result<RunReport, EvalError> {
    let path = dir.join(REPORT_FILE);
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(r) = serde_json::from_str::<RunReport>(&text) {
            return Ok(r);
        }
    }
    let records = read_records(&dir.join(RECORDS_FILE))?;
    if records.is_empty() && !dir.join(RECORDS_FILE).exists() {
        return Err(EvalError::Io {
            path: dir.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no report.json or episodes.jsonl"),
        });
    }
    let strategy = records.first().map(|r| r.strategy.clone()).unwrap_or_default();
    Ok(RunReport {
        aggregates: Aggregates::compute(&strategy, &records, costs),
        strategy,
        config: serde_json::Value::Null,
        records,
    })
}

pub fn trace_path(run_dir: &Path, episode_id: &str) -> PathBuf {
    run_dir.join(TRACES_DIR).join(format!("{}.jsonl", file_safe(episode_id)))
}
