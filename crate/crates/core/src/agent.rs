//! The uniform agent contract and its three interchangeable backends.
//!
//! An agent does two things: generate the next thought/action step for a
//! serialized trajectory, and reflect on the step it just produced with a
//! wrongness probability. Backends:
//!
//! - `synthetic`: a seeded stand-in whose mistakes are exactly decidable,
//!   driving the benchmark harness and the oracle-exactness checks;
//! - `scripted`: fixture replay, consuming entries per question id, for
//!   hermetic pipeline and golden-file tests;
//! - `remote`: an OpenAI-compatible chat-completions client with bounded
//!   timeout and retries.
//!
//! One agent instance serves one trajectory at a time; distinct instances
//! run concurrently without shared mutable state.

mod remote;
mod scripted;
mod synthetic;

pub use remote::{RemoteConfig, VERDICT_QUERY};
pub use scripted::{ScriptedConfig, ScriptedEntry, ScriptedFixture};
pub use synthetic::SyntheticAgentConfig;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{ByteTokenEstimator, TokenEstimator};
use crate::synth::SyntheticTaskSet;
use crate::trajectory::Step;

/// Which side of the collaboration a profile plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentRole {
    Local,
    Cloud,
}

/// Decoding parameters. `top_k` is forwarded to backends that support it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
}

fn default_max_new_tokens() -> u32 {
    256
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            top_k: None,
            max_new_tokens: default_max_new_tokens(),
        }
    }
}

/// Backend selection and its configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Remote(RemoteConfig),
    Scripted(ScriptedConfig),
    Synthetic(SyntheticAgentConfig),
}

/// A generation endpoint with the parameter count used for cost accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    #[serde(default)]
    pub name: String,
    pub role: AgentRole,
    pub param_count: u64,
    pub backend: BackendConfig,
    #[serde(default)]
    pub sampling: SamplingParams,
}

impl AgentProfile {
    pub fn validate(&self) -> Result<(), AgentError> {
        let invalid = |message: String| AgentError::InvalidProfile {
            name: self.name.clone(),
            message,
        };
        if self.param_count == 0 {
            return Err(invalid("param_count must be > 0".into()));
        }
        if self.sampling.top_k == Some(0) {
            return Err(invalid("top_k must be >= 1 when present".into()));
        }
        if self.sampling.temperature.is_nan() || self.sampling.temperature < 0.0 {
            return Err(invalid("temperature must be >= 0".into()));
        }
        if let BackendConfig::Synthetic(cfg) = &self.backend {
            for (label, rate) in [
                ("step_error_rate", cfg.step_error_rate),
                ("detect_rate_when_wrong", cfg.detect_rate_when_wrong),
                (
                    "false_alarm_rate_when_correct",
                    cfg.false_alarm_rate_when_correct,
                ),
            ] {
                if !(0.0..=1.0).contains(&rate) {
                    return Err(invalid(format!("{label} must lie in [0,1], got {rate}")));
                }
            }
        }
        Ok(())
    }
}

/// One generated thought/action proposal with its accounting signals.
#[derive(Debug, Clone, PartialEq)]
pub struct StepProposal {
    pub thought: String,
    pub action_text: String,
    /// Per generated token log-probabilities, each <= 0, when the backend
    /// exposes them; the length equals `generated_token_count`.
    pub token_logprobs: Option<Vec<f64>>,
    pub prompt_token_count: u64,
    pub generated_token_count: u64,
}

/// Inputs for one generation call.
#[derive(Debug, Clone, Copy)]
pub struct StepRequest<'a> {
    pub question_id: &'a str,
    pub question: &'a str,
    /// Serialized trajectory prompt (erased steps excluded).
    pub context: &'a str,
    /// Index the produced step will carry.
    pub next_index: usize,
    /// Observation of the last accepted step, if any.
    pub prev_observation: Option<&'a str>,
    pub sampling: &'a SamplingParams,
}

/// Inputs for one reflection call about the last completed step.
#[derive(Debug, Clone, Copy)]
pub struct ReflectRequest<'a> {
    pub question_id: &'a str,
    pub question: &'a str,
    /// Serialized trajectory including the step under judgment.
    pub context: &'a str,
    pub step: &'a Step,
    /// Observation of the accepted step before `step`, if any.
    pub prev_observation: Option<&'a str>,
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("scripted fixture exhausted for question {question_id}")]
    FixtureExhausted { question_id: String },
    #[error("no scripted fixture registered for profile {profile}")]
    MissingFixture { profile: String },
    #[error("no synthetic task registered for question {question_id}")]
    UnknownTask { question_id: String },
    #[error("reply carries no parsable action: {0}")]
    MalformedReply(String),
    #[error("reflection reply unparsable: {0}")]
    ReflectionUnparsable(String),
    #[error("invalid profile {name:?}: {message}")]
    InvalidProfile { name: String, message: String },
    #[error("fixture load failed: {0}")]
    FixtureLoad(String),
}

impl AgentError {
    /// Malformed-step errors are retried by the orchestrator; everything
    /// else aborts the run.
    pub fn is_malformed_step(&self) -> bool {
        matches!(self, AgentError::MalformedReply(_))
    }
}

/// The uniform agent contract.
pub trait Agent: Send {
    fn profile(&self) -> &AgentProfile;

    /// Generate the next step for the given context.
    fn generate_step(&mut self, request: &StepRequest<'_>) -> Result<StepProposal, AgentError>;

    /// Probability in [0, 1] that the last step is wrong.
    fn reflect(&mut self, request: &ReflectRequest<'_>) -> Result<f64, AgentError>;
}

/// Shared read-only resources agents are spawned from: the synthetic task
/// registry, loaded scripted fixtures, and the token estimator.
#[derive(Clone)]
pub struct AgentEnv {
    pub synthetic_tasks: Option<Arc<SyntheticTaskSet>>,
    scripted: HashMap<String, Arc<ScriptedFixture>>,
    pub estimator: Arc<dyn TokenEstimator>,
}

impl Default for AgentEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl AgentEnv {
    pub fn new() -> Self {
        Self {
            synthetic_tasks: None,
            scripted: HashMap::new(),
            estimator: Arc::new(ByteTokenEstimator),
        }
    }

    pub fn with_tasks(mut self, tasks: Arc<SyntheticTaskSet>) -> Self {
        self.synthetic_tasks = Some(tasks);
        self
    }

    pub fn with_estimator(mut self, estimator: Arc<dyn TokenEstimator>) -> Self {
        self.estimator = estimator;
        self
    }

    pub fn insert_scripted(&mut self, profile_name: &str, fixture: Arc<ScriptedFixture>) {
        self.scripted.insert(profile_name.to_string(), fixture);
    }

    /// Load every resource the given profiles need: scripted fixture files
    /// and, unless tasks are already present, the synthetic task file named
    /// by a synthetic backend. All synthetic profiles must agree on it.
    pub fn for_profiles(profiles: &[&AgentProfile]) -> Result<Self, AgentError> {
        let mut env = Self::new();
        let mut tasks_path: Option<PathBuf> = None;
        for profile in profiles {
            profile.validate()?;
            match &profile.backend {
                BackendConfig::Scripted(cfg) => {
                    let fixture = ScriptedFixture::load(&cfg.fixture_path)
                        .map_err(|e| AgentError::FixtureLoad(e.to_string()))?;
                    env.insert_scripted(&profile.name, Arc::new(fixture));
                }
                BackendConfig::Synthetic(cfg) => {
                    if let Some(path) = &cfg.tasks_path {
                        match &tasks_path {
                            Some(existing) if existing != path => {
                                return Err(AgentError::FixtureLoad(format!(
                                    "synthetic profiles disagree on tasks_path: {} vs {}",
                                    existing.display(),
                                    path.display()
                                )));
                            }
                            _ => tasks_path = Some(path.clone()),
                        }
                    }
                }
                BackendConfig::Remote(_) => {}
            }
        }
        if let Some(path) = tasks_path {
            let tasks = SyntheticTaskSet::load(&path)
                .map_err(|e| AgentError::FixtureLoad(e.to_string()))?;
            env.synthetic_tasks = Some(tasks);
        }
        Ok(env)
    }
}

/// Build a per-trajectory agent session. `session_seed` is the per-record
/// (or per-sample) seed derived by the caller; synthetic draws mix it with
/// the backend's own seed.
pub fn spawn_agent(
    profile: &AgentProfile,
    env: &AgentEnv,
    question_id: &str,
    session_seed: u64,
) -> Result<Box<dyn Agent>, AgentError> {
    profile.validate()?;
    match &profile.backend {
        BackendConfig::Synthetic(cfg) => {
            let tasks = env
                .synthetic_tasks
                .as_ref()
                .ok_or_else(|| AgentError::UnknownTask {
                    question_id: question_id.to_string(),
                })?;
            let task = tasks
                .get(question_id)
                .ok_or_else(|| AgentError::UnknownTask {
                    question_id: question_id.to_string(),
                })?
                .clone();
            Ok(Box::new(synthetic::SyntheticSession::new(
                profile.clone(),
                cfg.clone(),
                task,
                session_seed,
                env.estimator.clone(),
            )))
        }
        BackendConfig::Scripted(_) => {
            let fixture = env
                .scripted
                .get(&profile.name)
                .ok_or_else(|| AgentError::MissingFixture {
                    profile: profile.name.clone(),
                })?
                .clone();
            Ok(Box::new(scripted::ScriptedSession::new(
                profile.clone(),
                fixture,
                env.estimator.clone(),
            )))
        }
        BackendConfig::Remote(cfg) => Ok(Box::new(remote::RemoteSession::new(
            profile.clone(),
            cfg.clone(),
            env.estimator.clone(),
        )?)),
    }
}

/// Environment variable carrying the API key for a profile.
pub fn api_key_variable(profile_name: &str) -> String {
    let sanitized: String = profile_name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("ADASWITCH_API_KEY_{sanitized}")
}
