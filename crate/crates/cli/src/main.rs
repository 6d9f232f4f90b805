use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use hermes_core::agent::{replay, run_episode, AgentContext, ReplayError};
use hermes_core::config::Config;
use hermes_core::harness::dataset::{load_dataset, parse_dataset, ProblemInstance};
use hermes_core::harness::report::{render, ReportFormat};
use hermes_core::harness::{load_run, trace_path, Evaluator, Strategy, TRACES_DIR};
use hermes_core::memory::MemoryStore;
use hermes_core::prompts::Catalog;
use hermes_core::prover::Verifier;
use hermes_core::scheduler::Scheduler;
use hermes_core::trace::{EpisodeTrace, EventKind};

#[derive(Parser)]
#[command(name = "hermes", version, about = "Reasoning agent with Lean-checked intermediate steps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode on a problem file and print the verdict stream.
    Solve {
        /// JSON object with `id`, `problem` and `answer`, or plain problem text.
        problem: PathBuf,
        #[arg(long, default_value = "hermes.toml")]
        config: PathBuf,
        /// Where the trace is written.
        #[arg(long, default_value = "runs/solve")]
        out: PathBuf,
        /// Disable the verification tool.
        #[arg(long)]
        no_tool: bool,
    },
    /// Evaluate a JSONL dataset.
    Eval {
        dataset: PathBuf,
        /// hermes@1, zscot@1 or majority@N.
        #[arg(long, default_value = "hermes@1")]
        strategy: String,
        /// Sample count for majority voting; overrides the `@N` suffix.
        #[arg(long)]
        n: Option<u32>,
        #[arg(long, default_value = "hermes.toml")]
        config: PathBuf,
        /// Results go here; rerunning with the same directory resumes.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Skip malformed dataset lines instead of failing.
        #[arg(long)]
        permissive: bool,
        /// Only evaluate the first N problems.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value = "table")]
        format: String,
    },
    /// Re-run a recorded episode against its own recorded replies.
    Replay {
        trace: PathBuf,
        /// Supplies the prompt catalog if the run used a custom one.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the aggregates of a run directory.
    Report {
        run_dir: PathBuf,
        #[arg(long, default_value = "table")]
        format: String,
        /// Cost models used when the report has to be rebuilt from records.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    #[command(hide = true)]
    StubChecker,
}

/// Errors carrying the process exit code.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Dataset(anyhow::Error),
    Mismatch(String),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Dataset(_) => 2,
            Failure::Mismatch(_) => 3,
            Failure::Other(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "config error: {e:#}"),
            Failure::Dataset(e) => write!(f, "dataset error: {e:#}"),
            Failure::Mismatch(m) => write!(f, "replay mismatch: {m}"),
            Failure::Other(e) => write!(f, "{e:#}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::StubChecker = cli.command {
        return match hermes_core::lean::stub::run() {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("stub checker: {e}");
                ExitCode::from(4)
            }
        };
    }
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("HERMES_LOG"))
        .with_writer(std::io::stderr)
        .init();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("starting runtime: {e}");
            return ExitCode::from(4);
        }
    };
    match runtime.block_on(dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("hermes: {f}");
            ExitCode::from(f.code())
        }
    }
}

async fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Solve {
            problem,
            config,
            out,
            no_tool,
        } => solve(&problem, &config, &out, no_tool).await,
        Command::Eval {
            dataset,
            strategy,
            n,
            config,
            run_dir,
            permissive,
            limit,
            format,
        } => {
            let format: ReportFormat = format.parse().map_err(|e: String| Failure::Config(anyhow!(e)))?;
            let mut strategy: Strategy = strategy.parse().map_err(|e: String| Failure::Config(anyhow!(e)))?;
            if let Some(n) = n {
                strategy = match strategy {
                    Strategy::Majority(_) if n >= 1 => Strategy::Majority(n),
                    Strategy::Majority(_) => return Err(Failure::Config(anyhow!("--n must be at least 1"))),
                    other => return Err(Failure::Config(anyhow!("--n only applies to majority voting, not {other}"))),
                };
            }
            eval(&dataset, strategy, &config, run_dir.as_deref(), permissive, limit, format).await
        }
        Command::Replay { trace, config } => replay_trace(&trace, config.as_deref()).await,
        Command::Report {
            run_dir,
            format,
            config,
        } => {
            let format: ReportFormat = format.parse().map_err(|e: String| Failure::Config(anyhow!(e)))?;
            let costs = match config {
                Some(p) => Config::load(&p).map_err(|e| Failure::Config(e.into()))?.costs,
                None => Default::default(),
            };
            let report = load_run(&run_dir, &costs).map_err(|e| Failure::Other(e.into()))?;
            print!("{}", render(&report.aggregates, format));
            if format == ReportFormat::Structured {
                println!();
            }
            Ok(())
        }
        Command::StubChecker => unreachable!("handled before the runtime starts"),
    }
}

fn setup(config_path: &Path, tool_enabled: bool, memory: Arc<MemoryStore>) -> Result<Evaluator, Failure> {
    let cfail = |e: anyhow::Error| Failure::Config(e);
    let config = Config::load(config_path).map_err(|e| cfail(e.into()))?;
    config.require_roles(tool_enabled).map_err(|e| cfail(e.into()))?;
    let checker = config.checker_config();
    if tool_enabled {
        checker.validate().map_err(|e| cfail(e.into()))?;
    }
    let backends = config.build_backends().map_err(|e| cfail(e.into()))?;
    let catalog = Arc::new(config.catalog().map_err(|e| cfail(e.into()))?);
    let scheduler = Scheduler::new(checker, config.scheduler_config());
    let verifier = Verifier {
        backends: backends.clone(),
        scheduler,
        catalog: catalog.clone(),
        memory,
    };
    let mut episode = config.episode_config();
    episode.tool_enabled = tool_enabled;
    Ok(Evaluator {
        backends,
        verifier: Arc::new(verifier),
        catalog,
        episode,
        costs: config.costs.clone(),
        parallelism: config.eval.parallelism,
        config_snapshot: serde_json::to_value(&config).unwrap_or_default(),
    })
}

fn read_problem(path: &Path) -> Result<ProblemInstance, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Dataset)?;
    let source = path.display().to_string();
    if let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) {
        if value.is_object() {
            let line = serde_json::to_string(&value).expect("json value serializes");
            let mut d = parse_dataset(&line, &source, false).map_err(|e| Failure::Dataset(e.into()))?;
            return Ok(d.problems.remove(0));
        }
    }
    let statement = text.trim();
    if statement.is_empty() {
        return Err(Failure::Dataset(anyhow!("{source} is empty")));
    }
    Ok(ProblemInstance {
        id: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "problem".into()),
        statement: statement.to_string(),
        ground_truth: String::new(),
        subject: None,
        source_dataset: source,
    })
}

async fn solve(problem_path: &Path, config_path: &Path, out: &Path, no_tool: bool) -> Result<(), Failure> {
    let problem = read_problem(problem_path)?;
    let evaluator = setup(config_path, !no_tool, Arc::new(MemoryStore::new()))?;
    let mut episode = evaluator.episode.clone();
    episode.check_answer = !problem.ground_truth.is_empty();
    let ctx = AgentContext {
        backends: &evaluator.backends,
        verifier: evaluator.verifier.as_ref(),
        catalog: &evaluator.catalog,
    };
    let result = run_episode(&problem, &problem.id, &episode, &ctx).await;

    for event in &result.trace.events {
        match &event.kind {
            EventKind::ToolCall { step: Some(step), .. } => println!("step     {}", one_line(&step.text)),
            EventKind::Verdict { verdict, .. } => println!("verdict  {}  {}", verdict.label.token(), one_line(&verdict.evidence)),
            _ => {}
        }
    }
    let path = trace_path(out, &result.episode_id);
    result
        .trace
        .write(&path)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::Other)?;
    println!("answer   {}", result.final_answer.as_deref().unwrap_or("-"));
    if let Some(c) = result.correct {
        println!("correct  {c}");
    }
    println!("ended    {}", serde_json::to_value(result.termination).unwrap_or_default().as_str().unwrap_or("?"));
    println!("trace    {}", path.display());
    Ok(())
}

fn one_line(s: &str) -> String {
    let flat = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() > 120 {
        format!("{}...", flat.chars().take(117).collect::<String>())
    } else {
        flat
    }
}

async fn eval(
    dataset: &Path,
    strategy: Strategy,
    config_path: &Path,
    run_dir: Option<&Path>,
    permissive: bool,
    limit: Option<usize>,
    format: ReportFormat,
) -> Result<(), Failure> {
    let data = load_dataset(dataset, permissive).map_err(|e| Failure::Dataset(e.into()))?;
    for (line, why) in &data.skipped {
        eprintln!("skipped line {line}: {why}");
    }
    let mut problems = data.problems;
    if let Some(n) = limit {
        problems.truncate(n);
    }
    let probe = Config::load(config_path).map_err(|e| Failure::Config(e.into()))?;
    let memory = match run_dir {
        Some(dir) if probe.eval.memory_snapshots => MemoryStore::with_snapshots(dir.join("memory")),
        _ => MemoryStore::new(),
    };
    let evaluator = setup(config_path, strategy == Strategy::Hermes, Arc::new(memory))?;
    let report = evaluator
        .evaluate(&problems, strategy, run_dir)
        .await
        .map_err(|e| Failure::Other(e.into()))?;
    print!("{}", render(&report.aggregates, format));
    if format == ReportFormat::Structured {
        println!();
    }
    if let Some(dir) = run_dir {
        eprintln!("results in {} (traces under {TRACES_DIR}/)", dir.display());
    }
    Ok(())
}

async fn replay_trace(path: &Path, config: Option<&Path>) -> Result<(), Failure> {
    let trace = EpisodeTrace::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Other)?;
    let catalog = match config {
        Some(p) => Config::load(p)
            .and_then(|c| c.catalog())
            .map_err(|e| Failure::Config(e.into()))?,
        None => Catalog::builtin().clone(),
    };
    let result = replay(&trace, &catalog).await.map_err(|e| match e {
        ReplayError::TimeLimited => Failure::Mismatch(e.to_string()),
        other => Failure::Other(other.into()),
    })?;
    let recorded = trace.without_timestamps().to_jsonl();
    let replayed = result.trace.without_timestamps().to_jsonl();
    if recorded != replayed {
        let line = recorded
            .lines()
            .zip(replayed.lines())
            .position(|(a, b)| a != b)
            .unwrap_or_else(|| recorded.lines().count().min(replayed.lines().count()));
        return Err(Failure::Mismatch(format!("traces diverge at event {}", line + 1)));
    }
    println!(
        "replay identical: {} events, answer {}",
        trace.events.len(),
        result.final_answer.as_deref().unwrap_or("-")
    );
    Ok(())
}
