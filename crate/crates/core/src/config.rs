//! JSON configuration: agent profiles, tool fixture paths, and defaults.
//!
//! ```json
//! {
//!   "profiles": {
//!     "local": {"role": "local", "param_count": 1300000000,
//!               "backend": {"kind": "synthetic", "step_error_rate": 0.3,
//!                           "detect_rate_when_wrong": 0.9,
//!                           "false_alarm_rate_when_correct": 0.1,
//!                           "seed": 11, "tokens_per_step": 24}},
//!     "cloud": {"role": "cloud", "param_count": 30000000000,
//!               "backend": {"kind": "remote", "base_url": "http://...",
//!                           "model": "m", "timeout_ms": 30000,
//!                           "retries": 2, "logprobs": true}}
//!   },
//!   "tools": {"knowledge_path": "knowledge.jsonl", "qa_path": "qa.jsonl"},
//!   "defaults": {"max_steps": 15, "retries": 2, "tolerance": 1e-6}
//! }
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    AgentError, AgentProfile, AgentRole, BackendConfig, SamplingParams, SyntheticAgentConfig,
};
use crate::tools::{ToolContext, ToolFixtureError};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ToolPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Defaults {
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_max_steps() -> u32 {
    15
}

fn default_retries() -> u32 {
    2
}

fn default_tolerance() -> f64 {
    1e-6
}

impl Default for Defaults {
    fn default() -> Self {
        Self {
            max_steps: default_max_steps(),
            retries: default_retries(),
            tolerance: default_tolerance(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    #[serde(default)]
    pub profiles: BTreeMap<String, AgentProfile>,
    #[serde(default)]
    pub tools: ToolPaths,
    #[serde(default)]
    pub defaults: Defaults,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config JSON in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("no profile named {0:?} in the configuration")]
    UnknownProfile(String),
    #[error(transparent)]
    Profile(#[from] AgentError),
    #[error(transparent)]
    Tools(#[from] ToolFixtureError),
}

impl Config {
    /// Load and validate a config file. Profile names are taken from the
    /// map keys.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: display.clone(),
            source,
        })?;
        let mut config: Config =
            serde_json::from_str(&text).map_err(|source| ConfigError::Json {
                path: display,
                source,
            })?;
        for (name, profile) in config.profiles.iter_mut() {
            profile.name = name.clone();
            profile.validate()?;
        }
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let display = path.display().to_string();
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, format!("{text}\n")).map_err(|source| ConfigError::Io {
            path: display,
            source,
        })
    }

    pub fn profile(&self, name: &str) -> Result<&AgentProfile, ConfigError> {
        self.profiles
            .get(name)
            .ok_or_else(|| ConfigError::UnknownProfile(name.to_string()))
    }

    /// Tool context loaded from the configured fixture paths.
    pub fn tool_context(&self) -> Result<ToolContext, ConfigError> {
        Ok(ToolContext::load(
            self.tools.knowledge_path.as_deref(),
            self.tools.qa_path.as_deref(),
        )?)
    }

    /// Built-in synthetic local/cloud pair used by `simulate` when no
    /// config file is given: a 1.3B-parameter local agent with a 30%
    /// step-error rate and 0.9/0.1 detection against a 30B cloud agent
    /// with a 5% step-error rate.
    pub fn default_synthetic(tasks_path: Option<PathBuf>) -> Self {
        let mut profiles = BTreeMap::new();
        profiles.insert(
            "local".to_string(),
            AgentProfile {
                name: "local".into(),
                role: AgentRole::Local,
                param_count: 1_300_000_000,
                backend: BackendConfig::Synthetic(SyntheticAgentConfig {
                    step_error_rate: 0.3,
                    detect_rate_when_wrong: 0.9,
                    false_alarm_rate_when_correct: 0.1,
                    seed: 11,
                    tokens_per_step: 24,
                    tasks_path: tasks_path.clone(),
                }),
                sampling: SamplingParams::default(),
            },
        );
        profiles.insert(
            "cloud".to_string(),
            AgentProfile {
                name: "cloud".into(),
                role: AgentRole::Cloud,
                param_count: 30_000_000_000,
                backend: BackendConfig::Synthetic(SyntheticAgentConfig {
                    step_error_rate: 0.05,
                    detect_rate_when_wrong: 1.0,
                    false_alarm_rate_when_correct: 0.0,
                    seed: 12,
                    tokens_per_step: 24,
                    tasks_path,
                }),
                sampling: SamplingParams::default(),
            },
        );
        Config {
            profiles,
            tools: ToolPaths::default(),
            defaults: Defaults::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_and_validates_profiles() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(
            &path,
            r#"{
  "profiles": {
    "local": {"role": "local", "param_count": 1300000000,
              "backend": {"kind": "synthetic", "step_error_rate": 0.3,
                          "detect_rate_when_wrong": 0.9,
                          "false_alarm_rate_when_correct": 0.1,
                          "seed": 11, "tokens_per_step": 24}},
    "cloud": {"role": "cloud", "param_count": 30000000000,
              "backend": {"kind": "remote", "base_url": "http://localhost:1",
                          "model": "m"}}
  },
  "defaults": {"max_steps": 10, "retries": 1, "tolerance": 1e-6}
}"#,
        )
        .unwrap();
        let config = Config::load(&path).unwrap();
        assert_eq!(config.profiles.len(), 2);
        assert_eq!(config.profile("local").unwrap().name, "local");
        assert_eq!(config.defaults.max_steps, 10);
        assert_eq!(config.defaults.retries, 1);
        assert!(matches!(
            config.profile("cloud").unwrap().backend,
            BackendConfig::Remote(_)
        ));
        assert!(matches!(
            config.profile("nope"),
            Err(ConfigError::UnknownProfile(_))
        ));
    }

    #[test]
    fn invalid_profile_is_rejected_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(
            &path,
            r#"{"profiles": {"local": {"role": "local", "param_count": 0,
                "backend": {"kind": "remote", "base_url": "x", "model": "m"}}}}"#,
        )
        .unwrap();
        assert!(matches!(
            Config::load(&path),
            Err(ConfigError::Profile(_))
        ));
    }

    #[test]
    fn defaults_fill_in() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"profiles": {}}"#).unwrap();
        let config = Config::load(&path).unwrap();
        assert_eq!(config.defaults.max_steps, 15);
        assert_eq!(config.defaults.retries, 2);
        assert_eq!(config.defaults.tolerance, 1e-6);
    }

    #[test]
    fn default_synthetic_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let config = Config::default_synthetic(Some("tasks.jsonl".into()));
        config.save(&path).unwrap();
        let back = Config::load(&path).unwrap();
        assert_eq!(back, config);
    }
}
