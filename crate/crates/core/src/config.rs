//! TOML run configuration and construction of the runtime pieces from it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::EpisodeConfig;
use crate::backends::hashing::HashingEmbedder;
use crate::backends::openai::{HttpProfile, OpenAiChat, OpenAiEmbedder};
use crate::backends::scripted::{ScriptedChat, ScriptedEmbedder};
use crate::backends::{Backends, ChatBackend, ChatProfile, EmbedBackend, RetryPolicy, Role, SamplingParams};
use crate::harness::flops::ModelCostConfig;
use crate::lean::CheckerConfig;
use crate::prompts::Catalog;
use crate::prover::{ProverBudget, VerifierConfig, DEFAULT_BUILTIN_TACTIC};
use crate::scheduler::{default_workers, SchedulerConfig};
use crate::translator::TranslationBudget;

/// Toolchain the checker is expected to run.
pub const LEAN_VERSION: &str = "v4.9.0";
/// Mathlib revision matching [`LEAN_VERSION`].
pub const MATHLIB_REV: &str = "v4.9.0";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckerSection {
    pub executable: PathBuf,
    pub args: Vec<String>,
    pub project_root: PathBuf,
    pub timeout_secs: f64,
    pub startup_timeout_secs: f64,
    pub startup_header: String,
    pub lean_version: String,
    pub mathlib_rev: String,
}

impl Default for CheckerSection {
    fn default() -> Self {
        Self {
            executable: PathBuf::from("repl"),
            args: Vec::new(),
            project_root: PathBuf::from("."),
            timeout_secs: 60.0,
            startup_timeout_secs: 300.0,
            startup_header: "import Mathlib".into(),
            lean_version: LEAN_VERSION.into(),
            mathlib_rev: MATHLIB_REV.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerSection {
    pub workers: Option<usize>,
    pub max_respawns: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    pub k_t: u32,
    pub k_p: u32,
    pub memory_k: usize,
    pub token_budget: u64,
    pub time_limit_secs: f64,
    pub max_tool_calls: u32,
}

impl Default for BudgetSection {
    fn default() -> Self {
        Self {
            k_t: 4,
            k_p: 4,
            memory_k: 3,
            token_budget: 8192,
            time_limit_secs: 900.0,
            max_tool_calls: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub memory: bool,
    pub prover_model: bool,
    pub prescreen_judge: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            memory: true,
            prover_model: true,
            prescreen_judge: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProverSection {
    pub builtin_tactics: Vec<String>,
}

impl Default for ProverSection {
    fn default() -> Self {
        Self {
            builtin_tactics: vec![DEFAULT_BUILTIN_TACTIC.into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub parallelism: usize,
    /// Write per-episode memory snapshots into the run directory.
    pub memory_snapshots: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            parallelism: 1,
            memory_snapshots: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSection {
    Openai {
        endpoint: String,
        model: String,
        /// Environment variable holding the API key.
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default)]
        temperature: Option<f32>,
        #[serde(default)]
        max_tokens: Option<u32>,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default = "default_retries")]
        retries: u32,
        #[serde(default = "default_backoff")]
        backoff_ms: u64,
        #[serde(default = "default_request_timeout")]
        timeout_secs: f64,
    },
    /// JSON playback script (chat roles) or text-to-vector map (embedder).
    Script {
        path: PathBuf,
        #[serde(default)]
        model: Option<String>,
    },
    /// Offline bag-of-words embedder.
    Hashing {
        #[serde(default = "default_dim")]
        dim: usize,
    },
}

fn default_retries() -> u32 {
    2
}

fn default_backoff() -> u64 {
    500
}

fn default_request_timeout() -> f64 {
    300.0
}

fn default_dim() -> usize {
    256
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Prompt catalog override; the bundled catalog is used otherwise.
    pub prompts: Option<PathBuf>,
    pub checker: CheckerSection,
    pub scheduler: SchedulerSection,
    pub budgets: BudgetSection,
    pub ablation: AblationSection,
    pub prover: ProverSection,
    pub eval: EvalSection,
    pub backends: BTreeMap<Role, BackendSection>,
    pub costs: BTreeMap<Role, ModelCostConfig>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Config {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut c: Config = toml::from_str(text)?;
        c.base_dir = base_dir.to_path_buf();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let b = &self.budgets;
        if b.k_t == 0 || b.k_p == 0 {
            return Err(invalid("budgets.k_t and budgets.k_p must be at least 1"));
        }
        if b.token_budget == 0 || !(b.time_limit_secs > 0.0) {
            return Err(invalid("budgets.token_budget and budgets.time_limit_secs must be positive"));
        }
        if !(self.checker.timeout_secs > 0.0) || !(self.checker.startup_timeout_secs > 0.0) {
            return Err(invalid("checker timeouts must be positive"));
        }
        if self.scheduler.workers == Some(0) || self.eval.parallelism == 0 {
            return Err(invalid("scheduler.workers and eval.parallelism must be at least 1"));
        }
        for (role, c) in &self.costs {
            c.validate().map_err(|e| invalid(format!("costs.{role}: {e}")))?;
        }
        for (role, section) in &self.backends {
            match (role, section) {
                (Role::Embedder, BackendSection::Openai { .. } | BackendSection::Hashing { .. } | BackendSection::Script { .. }) => {}
                (_, BackendSection::Hashing { .. }) => {
                    return Err(invalid(format!("backends.{role}: `hashing` is only valid for the embedder")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Checks that every role the run will call has a backend.
    pub fn require_roles(&self, tool_enabled: bool) -> Result<(), ConfigError> {
        let mut needed = vec![Role::Reasoner];
        if tool_enabled {
            needed.push(Role::Autoformalizer);
            if self.ablation.prover_model {
                needed.push(Role::Prover);
            }
            if self.ablation.memory {
                needed.push(Role::Embedder);
            }
        }
        for role in needed {
            if !self.backends.contains_key(&role) {
                return Err(invalid(format!("no backend configured for role `{role}`")));
            }
        }
        Ok(())
    }

    pub fn checker_config(&self) -> CheckerConfig {
        let mut c = CheckerConfig::new(self.resolve(&self.checker.executable), self.resolve(&self.checker.project_root));
        c.args = self.checker.args.clone();
        c.default_timeout = Duration::from_secs_f64(self.checker.timeout_secs);
        c.startup_timeout = Duration::from_secs_f64(self.checker.startup_timeout_secs);
        c.startup_header = self.checker.startup_header.clone();
        c.apply_env_override();
        c
    }

    pub fn scheduler_config(&self) -> SchedulerConfig {
        let defaults = SchedulerConfig::default();
        SchedulerConfig {
            workers: self.scheduler.workers.unwrap_or_else(|| default_workers(self.budgets.k_p as usize)),
            max_respawns: self.scheduler.max_respawns.unwrap_or(defaults.max_respawns),
            default_timeout: Duration::from_secs_f64(self.checker.timeout_secs),
        }
    }

    pub fn verifier_config(&self) -> VerifierConfig {
        VerifierConfig {
            translation: TranslationBudget { k_t: self.budgets.k_t },
            prover: ProverBudget {
                k_p: self.budgets.k_p,
                builtin_tactics: self.prover.builtin_tactics.clone(),
            },
            memory_k: self.budgets.memory_k,
            use_memory: self.ablation.memory,
            use_prover_model: self.ablation.prover_model,
            prescreen_judge: self.ablation.prescreen_judge,
            check_timeout: Duration::from_secs_f64(self.checker.timeout_secs),
        }
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            token_budget: self.budgets.token_budget,
            wall_clock_limit: Duration::from_secs_f64(self.budgets.time_limit_secs),
            tool_enabled: true,
            max_tool_calls: self.budgets.max_tool_calls,
            check_answer: true,
            seed: None,
            verifier: self.verifier_config(),
        }
    }

    pub fn catalog(&self) -> Result<Catalog, ConfigError> {
        match &self.prompts {
            Some(p) => Catalog::load(&self.resolve(p)).map_err(|e| invalid(e.to_string())),
            None => Ok(Catalog::builtin().clone()),
        }
    }

    pub fn build_backends(&self) -> Result<Backends, ConfigError> {
        let mut backends = Backends::new();
        for (role, section) in &self.backends {
            if *role == Role::Embedder {
                let (embedder, retry) = self.embedder(section)?;
                backends = backends.with_embedder(embedder, retry);
            } else {
                backends = backends.with_chat(*role, self.chat_profile(*role, section)?);
            }
        }
        Ok(backends)
    }

    fn chat_profile(&self, role: Role, section: &BackendSection) -> Result<ChatProfile, ConfigError> {
        match section {
            BackendSection::Openai {
                endpoint,
                model,
                api_key_env,
                temperature,
                max_tokens,
                seed,
                retries,
                backoff_ms,
                timeout_secs,
            } => {
                let chat: Arc<dyn ChatBackend> = Arc::new(
                    OpenAiChat::new(http_profile(role, endpoint, model, api_key_env, *timeout_secs)?)
                        .map_err(|e| invalid(e.to_string()))?,
                );
                Ok(ChatProfile::new(chat)
                    .with_sampling(SamplingParams {
                        temperature: *temperature,
                        seed: *seed,
                        max_tokens: *max_tokens,
                    })
                    .with_retry(RetryPolicy {
                        retries: *retries,
                        backoff_ms: *backoff_ms,
                    }))
            }
            BackendSection::Script { path, model } => {
                let name = model.clone().unwrap_or_else(|| format!("script-{role}"));
                let chat = ScriptedChat::from_file(name, &self.resolve(path)).map_err(|e| invalid(e.to_string()))?;
                Ok(ChatProfile::new(Arc::new(chat)).with_retry(RetryPolicy::none()))
            }
            BackendSection::Hashing { .. } => Err(invalid(format!("backends.{role}: not a chat backend"))),
        }
    }

    fn embedder(&self, section: &BackendSection) -> Result<(Arc<dyn EmbedBackend>, RetryPolicy), ConfigError> {
        match section {
            BackendSection::Openai {
                endpoint,
                model,
                api_key_env,
                retries,
                backoff_ms,
                timeout_secs,
                ..
            } => Ok((
                Arc::new(
                    OpenAiEmbedder::new(http_profile(Role::Embedder, endpoint, model, api_key_env, *timeout_secs)?)
                        .map_err(|e| invalid(e.to_string()))?,
                ),
                RetryPolicy {
                    retries: *retries,
                    backoff_ms: *backoff_ms,
                },
            )),
            BackendSection::Hashing { dim } => Ok((Arc::new(HashingEmbedder::new(*dim)), RetryPolicy::none())),
            BackendSection::Script { path, .. } => {
                let path = self.resolve(path);
                let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                let map: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)
                    .map_err(|e| invalid(format!("embedding script {}: {e}", path.display())))?;
                let dim = map.values().next().map(Vec::len).unwrap_or(default_dim());
                let e = ScriptedEmbedder::new(map).with_fallback(Arc::new(HashingEmbedder::new(dim)));
                Ok((Arc::new(e), RetryPolicy::none()))
            }
        }
    }
}

fn http_profile(
    role: Role,
    endpoint: &str,
    model: &str,
    api_key_env: &Option<String>,
    timeout_secs: f64,
) -> Result<HttpProfile, ConfigError> {
    let api_key = match api_key_env {
        Some(var) => Some(
            std::env::var(var).map_err(|_| invalid(format!("backends.{role}: environment variable {var} is not set")))?,
        ),
        None => None,
    };
    Ok(HttpProfile {
        endpoint: endpoint.trim_end_matches('/').to_string(),
        model: model.to_string(),
        api_key,
        request_timeout: Duration::from_secs_f64(timeout_secs),
    })
}
