//! Scripted replay backend.
//!
//! A fixture is a JSONL list of `{question_id, step_index, thought, action,
//! reflect_prob?}` entries. Generation consumes the next entry for the
//! requested question id; the cursor is shared across sessions of the same
//! fixture, so successive examination samples of one question replay
//! successive fixture entries. Reflection returns the `reflect_prob` of the
//! entry most recently served by this session (0 when absent).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::metrics::TokenEstimator;

use super::{Agent, AgentError, AgentProfile, ReflectRequest, StepProposal, StepRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedConfig {
    pub fixture_path: PathBuf,
}

/// One replayable generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedEntry {
    pub question_id: String,
    pub step_index: usize,
    pub thought: String,
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflect_prob: Option<f64>,
}

/// Loaded fixture with per-question consumption cursors.
#[derive(Debug, Default)]
pub struct ScriptedFixture {
    entries: HashMap<String, Vec<ScriptedEntry>>,
    cursors: Mutex<HashMap<String, usize>>,
}

impl ScriptedFixture {
    pub fn from_entries(entries: Vec<ScriptedEntry>) -> Self {
        let mut map: HashMap<String, Vec<ScriptedEntry>> = HashMap::new();
        for entry in entries {
            map.entry(entry.question_id.clone()).or_default().push(entry);
        }
        Self {
            entries: map,
            cursors: Mutex::new(HashMap::new()),
        }
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let display = path.display().to_string();
        let file = File::open(path)
            .map_err(|e| AgentError::FixtureLoad(format!("{display}: {e}")))?;
        let mut entries = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line =
                line.map_err(|e| AgentError::FixtureLoad(format!("{display}: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptedEntry = serde_json::from_str(&line).map_err(|e| {
                AgentError::FixtureLoad(format!("{display} line {}: {e}", idx + 1))
            })?;
            entries.push(entry);
        }
        Ok(Self::from_entries(entries))
    }

    /// Consume the next entry for a question.
    fn next(&self, question_id: &str) -> Option<ScriptedEntry> {
        let mut cursors = self.cursors.lock().expect("cursor lock");
        let cursor = cursors.entry(question_id.to_string()).or_insert(0);
        let entry = self.entries.get(question_id)?.get(*cursor)?.clone();
        *cursor += 1;
        Some(entry)
    }
}

pub(super) struct ScriptedSession {
    profile: AgentProfile,
    fixture: Arc<ScriptedFixture>,
    last_reflect_prob: Option<f64>,
    estimator: Arc<dyn TokenEstimator>,
}

impl ScriptedSession {
    pub(super) fn new(
        profile: AgentProfile,
        fixture: Arc<ScriptedFixture>,
        estimator: Arc<dyn TokenEstimator>,
    ) -> Self {
        Self {
            profile,
            fixture,
            last_reflect_prob: None,
            estimator,
        }
    }
}

impl Agent for ScriptedSession {
    fn profile(&self) -> &AgentProfile {
        &self.profile
    }

    fn generate_step(&mut self, request: &StepRequest<'_>) -> Result<StepProposal, AgentError> {
        let entry = self.fixture.next(request.question_id).ok_or_else(|| {
            AgentError::FixtureExhausted {
                question_id: request.question_id.to_string(),
            }
        })?;
        self.last_reflect_prob = entry.reflect_prob;
        let generated = self
            .estimator
            .count(&format!("{} {}", entry.thought, entry.action));
        Ok(StepProposal {
            thought: entry.thought,
            action_text: entry.action,
            token_logprobs: None,
            prompt_token_count: self.estimator.count(request.context),
            generated_token_count: generated,
        })
    }

    fn reflect(&mut self, _request: &ReflectRequest<'_>) -> Result<f64, AgentError> {
        Ok(self.last_reflect_prob.unwrap_or(0.0))
    }
}
