//! Proof-checker subprocess management.
//!
//! A [`CheckerHandle`] owns one REPL subprocess and serves one request at a
//! time. Every request is self-contained: the configured startup header is
//! prepended to the snippet. Diagnostics are reduced to a [`CompilerReport`]
//! and, for proof checks, to a [`ProofOutcome`].
//!
//! Timeouts are reported in-band (`timed_out`). A timed-out or cancelled
//! request leaves the REPL mid-elaboration, so the process is terminated and
//! the handle transparently restarts it on the next request. A process that
//! dies on its own yields [`CheckerError::Crashed`] and the handle is dead.

pub mod protocol;
pub mod stub;

use std::path::PathBuf;
use std::process::Stdio;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::process::{Child, ChildStdin, ChildStdout, Command};

use protocol::{encode_request, Response};

/// Environment variable overriding [`CheckerConfig::executable`].
pub const CHECKER_ENV: &str = "HERMES_CHECKER";

const TERMINATE_GRACE: Duration = Duration::from_millis(500);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckerConfig {
    pub executable: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
    /// Working directory of the subprocess; supplies the proof library.
    pub project_root: PathBuf,
    #[serde(with = "secs")]
    pub default_timeout: Duration,
    /// Readiness deadline for the startup handshake.
    #[serde(with = "secs")]
    pub startup_timeout: Duration,
    /// Source prepended to every snippet (imports and options).
    pub startup_header: String,
    #[serde(default)]
    pub env: Vec<(String, String)>,
}

pub mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

impl CheckerConfig {
    pub fn new(executable: impl Into<PathBuf>, project_root: impl Into<PathBuf>) -> Self {
        Self {
            executable: executable.into(),
            args: Vec::new(),
            project_root: project_root.into(),
            default_timeout: Duration::from_secs(60),
            startup_timeout: Duration::from_secs(60),
            startup_header: "import Mathlib".into(),
            env: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), CheckerError> {
        if self.executable.as_os_str().is_empty() {
            return Err(CheckerError::InvalidConfig("executable path is empty".into()));
        }
        if self.default_timeout.is_zero() {
            return Err(CheckerError::InvalidConfig("default timeout must be positive".into()));
        }
        Ok(())
    }

    /// Applies [`CHECKER_ENV`] if set.
    pub fn apply_env_override(&mut self) {
        if let Some(path) = std::env::var_os(CHECKER_ENV).filter(|p| !p.is_empty()) {
            self.executable = path.into();
        }
    }

    /// Full text sent to the checker for `source`.
    pub fn assemble(&self, source: &str) -> String {
        match (self.startup_header.trim().is_empty(), source.trim().is_empty()) {
            (true, _) => source.to_string(),
            (false, true) => self.startup_header.clone(),
            (false, false) => format!("{}\n\n{}", self.startup_header, source),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
    Info,
}

/// 1-based line and column within the assembled source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Position {
    pub line: u32,
    pub column: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub pos: Option<Position>,
    pub text: String,
}

impl Diagnostic {
    pub fn is_sorry_warning(&self) -> bool {
        self.severity == Severity::Warning && self.text.contains("sorry")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompilerReport {
    pub messages: Vec<Diagnostic>,
    pub elapsed: f64,
    pub timed_out: bool,
    /// Placeholder holes reported by the checker.
    #[serde(default)]
    pub sorries: usize,
}

impl CompilerReport {
    fn timed_out(elapsed: Duration) -> Self {
        Self {
            messages: Vec::new(),
            elapsed: elapsed.as_secs_f64(),
            timed_out: true,
            sorries: 0,
        }
    }

    fn from_response(resp: Response, elapsed: Duration) -> Self {
        let mut messages: Vec<Diagnostic> = resp
            .messages
            .into_iter()
            .map(|m| Diagnostic {
                severity: match m.severity.as_str() {
                    "error" => Severity::Error,
                    "warning" => Severity::Warning,
                    _ => Severity::Info,
                },
                pos: m.pos.map(|p| Position {
                    line: p.line,
                    column: p.column + 1,
                }),
                text: m.data,
            })
            .collect();
        if let Some(text) = resp.message {
            messages.push(Diagnostic {
                severity: Severity::Error,
                pos: None,
                text,
            });
        }
        Self {
            messages,
            elapsed: elapsed.as_secs_f64(),
            timed_out: false,
            sorries: resp.sorries.len(),
        }
    }

    pub fn errors(&self) -> impl Iterator<Item = &Diagnostic> {
        self.messages.iter().filter(|m| m.severity == Severity::Error)
    }

    pub fn has_errors(&self) -> bool {
        self.errors().next().is_some()
    }

    pub fn has_sorry(&self) -> bool {
        self.sorries > 0 || self.messages.iter().any(Diagnostic::is_sorry_warning)
    }

    /// No error-severity messages and no timeout. Warnings, including
    /// placeholder warnings, are tolerated.
    pub fn compiles(&self) -> bool {
        !self.timed_out && !self.has_errors()
    }

    pub fn first_error(&self) -> Option<&str> {
        self.errors().next().map(|d| d.text.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProofStatus {
    Proved,
    Failed,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProofOutcome {
    pub status: ProofStatus,
    pub report: CompilerReport,
}

impl ProofOutcome {
    pub fn from_report(report: CompilerReport) -> Self {
        let status = if report.timed_out {
            ProofStatus::TimedOut
        } else if report.has_errors() || report.has_sorry() {
            ProofStatus::Failed
        } else {
            ProofStatus::Proved
        };
        Self { status, report }
    }

    pub fn proved(&self) -> bool {
        self.status == ProofStatus::Proved
    }
}

#[derive(Debug, Error)]
pub enum CheckerError {
    #[error("invalid checker configuration: {0}")]
    InvalidConfig(String),
    #[error("failed to spawn checker `{path}`: {source}")]
    SpawnFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checker not ready within {0:?}")]
    HandshakeTimeout(Duration),
    #[error("checker process {pid} crashed: {detail}")]
    Crashed { pid: u32, detail: String },
    #[error("checker handle is dead")]
    Dead,
    #[error("empty request: source and header are both empty")]
    EmptySource,
}

struct Process {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    pid: u32,
}

enum State {
    Live(Process),
    /// Process was terminated after a timeout or cancellation.
    Stale,
    Dead,
}

/// Single-owner handle on a checker subprocess. Not for concurrent use;
/// move it between workers instead.
pub struct CheckerHandle {
    config: Arc<CheckerConfig>,
    state: State,
    pid: u32,
    started_at: Instant,
    requests_served: u64,
    restarts: u32,
}

impl CheckerHandle {
    pub async fn start(config: Arc<CheckerConfig>) -> Result<Self, CheckerError> {
        config.validate()?;
        let process = spawn(&config).await?;
        Ok(Self {
            pid: process.pid,
            state: State::Live(process),
            config,
            started_at: Instant::now(),
            requests_served: 0,
            restarts: 0,
        })
    }

    pub fn pid(&self) -> u32 {
        self.pid
    }

    pub fn started_at(&self) -> Instant {
        self.started_at
    }

    pub fn requests_served(&self) -> u64 {
        self.requests_served
    }

    pub fn restarts(&self) -> u32 {
        self.restarts
    }

    pub fn is_dead(&self) -> bool {
        matches!(self.state, State::Dead)
    }

    pub fn config(&self) -> &CheckerConfig {
        &self.config
    }

    pub async fn check_compiles(&mut self, source: &str, timeout: Duration) -> Result<CompilerReport, CheckerError> {
        self.request(source, timeout).await
    }

    pub async fn check_proof(&mut self, source: &str, timeout: Duration) -> Result<ProofOutcome, CheckerError> {
        self.request(source, timeout).await.map(ProofOutcome::from_report)
    }

    async fn request(&mut self, source: &str, timeout: Duration) -> Result<CompilerReport, CheckerError> {
        let text = self.config.assemble(source);
        if text.trim().is_empty() {
            return Err(CheckerError::EmptySource);
        }
        match self.state {
            State::Dead => return Err(CheckerError::Dead),
            State::Stale => {
                let process = spawn(&self.config).await?;
                self.pid = process.pid;
                self.started_at = Instant::now();
                self.restarts += 1;
                self.state = State::Live(process);
            }
            State::Live(_) => {}
        }
        let State::Live(process) = &mut self.state else {
            unreachable!()
        };
        let started = Instant::now();
        let exchange = tokio::time::timeout(timeout, exchange(process, &text)).await;
        self.requests_served += 1;
        match exchange {
            Ok(Ok(resp)) => Ok(CompilerReport::from_response(resp, started.elapsed())),
            Ok(Err(detail)) => {
                let pid = process.pid;
                self.kill_now().await;
                self.state = State::Dead;
                Err(CheckerError::Crashed { pid, detail })
            }
            Err(_) => {
                self.terminate().await;
                Ok(CompilerReport::timed_out(started.elapsed()))
            }
        }
    }

    /// Sends SIGTERM, waits a short grace period, then kills. The next
    /// request restarts the process.
    pub async fn terminate(&mut self) {
        if let State::Live(process) = &mut self.state {
            send_sigterm(process.pid);
            if tokio::time::timeout(TERMINATE_GRACE, process.child.wait()).await.is_err() {
                let _ = process.child.kill().await;
            }
            self.state = State::Stale;
        }
    }

    async fn kill_now(&mut self) {
        if let State::Live(process) = &mut self.state {
            let _ = process.child.kill().await;
        }
    }
}

fn send_sigterm(pid: u32) {
    // SAFETY: plain kill(2) on a child pid we own.
    unsafe {
        libc::kill(pid as libc::pid_t, libc::SIGTERM);
    }
}

async fn spawn(config: &CheckerConfig) -> Result<Process, CheckerError> {
    let mut cmd = Command::new(&config.executable);
    cmd.args(&config.args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .kill_on_drop(true);
    if config.project_root.as_os_str().len() > 0 {
        cmd.current_dir(&config.project_root);
    }
    for (k, v) in &config.env {
        cmd.env(k, v);
    }
    let mut child = cmd.spawn().map_err(|source| CheckerError::SpawnFailure {
        path: config.executable.clone(),
        source,
    })?;
    let pid = child.id().unwrap_or_default();
    let stdin = child.stdin.take().expect("piped stdin");
    let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
    let mut process = Process {
        child,
        stdin,
        stdout,
        pid,
    };
    // Readiness: the header alone must elaborate.
    let header = if config.startup_header.trim().is_empty() {
        String::new()
    } else {
        config.startup_header.clone()
    };
    match tokio::time::timeout(config.startup_timeout, exchange(&mut process, &header)).await {
        Ok(Ok(_)) => Ok(process),
        Ok(Err(detail)) => {
            let _ = process.child.kill().await;
            Err(CheckerError::Crashed { pid, detail })
        }
        Err(_) => {
            let _ = process.child.kill().await;
            Err(CheckerError::HandshakeTimeout(config.startup_timeout))
        }
    }
}

async fn exchange(process: &mut Process, text: &str) -> Result<Response, String> {
    process
        .stdin
        .write_all(encode_request(text).as_bytes())
        .await
        .map_err(|e| format!("write failed: {e}"))?;
    process
        .stdin
        .flush()
        .await
        .map_err(|e| format!("flush failed: {e}"))?;
    let mut buf = String::new();
    loop {
        let mut line = String::new();
        let n = process
            .stdout
            .read_line(&mut line)
            .await
            .map_err(|e| format!("read failed: {e}"))?;
        if n == 0 {
            return Err("checker closed its output".into());
        }
        if line.trim().is_empty() {
            if buf.is_empty() {
                continue;
            }
            return serde_json::from_str(&buf).map_err(|e| format!("unparseable response: {e}"));
        }
        buf.push_str(&line);
        if let Ok(resp) = serde_json::from_str::<Response>(&buf) {
            return Ok(resp);
        }
    }
}
