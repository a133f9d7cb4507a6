//! The interaction-trajectory data model and its canonical text form.
//!
//! A trajectory records, per step, the author's thought, the surface form of
//! its action, and the tool observation. Rejected steps stay in the record
//! marked `erased` and are immediately followed by the replacement step with
//! the same index, so revised trajectories keep the full correction history.
//!
//! The canonical serialization is a fixed keyword scheme with 0-based
//! indices:
//!
//! ```text
//! Question: <question>
//! Thought 0: <thought>
//! Action 0: <action>
//! Observation 0: <observation>
//! Check 0: OK
//! ...
//! ```
//!
//! `Check` verdict lines appear only when the trajectory carries verdicts
//! (an erased step or an oracle label) and only when erased steps are
//! rendered; plain generation prompts omit them, which keeps prompts
//! prefix-stable as steps are appended and erased.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which agent produced a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Author {
    Local,
    Cloud,
    Gold,
}

/// Examination-time ground truth for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleLabel {
    Correct,
    Wrong,
}

/// Final grade of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Correct,
    Wrong,
    Unanswered,
}

/// One thought/action/observation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// 0-based ordinal. An erased step and its replacement share an index.
    pub index: usize,
    pub author: Author,
    pub thought: String,
    #[serde(rename = "action")]
    pub action_text: String,
    pub observation: String,
    /// The local agent's wrongness estimate for this step, in [0, 1].
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error_prob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub oracle_label: Option<OracleLabel>,
    /// Step was rejected and superseded by the next step with the same index.
    pub erased: bool,
}

impl Step {
    pub fn new(
        index: usize,
        author: Author,
        thought: impl Into<String>,
        action_text: impl Into<String>,
        observation: impl Into<String>,
    ) -> Self {
        Self {
            index,
            author,
            thought: thought.into(),
            action_text: action_text.into(),
            observation: observation.into(),
            error_prob: None,
            oracle_label: None,
            erased: false,
        }
    }
}

/// The full interaction record for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question_id: String,
    pub question: String,
    pub steps: Vec<Step>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_answer: Option<String>,
    pub outcome: Outcome,
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("step {index} is not the last non-erased step and cannot be erased")]
    NotLastStep { index: usize },
    #[error("trajectory has no non-erased step to erase")]
    NothingToErase,
    #[error("invalid trajectory: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid JSON on line {line} of {path}: {source}")]
    Json {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
}

impl Trajectory {
    pub fn new(question_id: impl Into<String>, question: impl Into<String>) -> Self {
        Self {
            question_id: question_id.into(),
            question: question.into(),
            steps: Vec::new(),
            final_answer: None,
            outcome: Outcome::Unanswered,
        }
    }

    /// Steps that are part of the accepted prompt, in order.
    pub fn non_erased_steps(&self) -> impl Iterator<Item = &Step> {
        self.steps.iter().filter(|s| !s.erased)
    }

    pub fn non_erased_len(&self) -> usize {
        self.non_erased_steps().count()
    }

    pub fn last_non_erased(&self) -> Option<&Step> {
        self.steps.iter().rev().find(|s| !s.erased)
    }

    /// Index the next appended step should carry.
    pub fn next_index(&self) -> usize {
        self.last_non_erased().map(|s| s.index + 1).unwrap_or(0)
    }

    /// True once examination or reflection produced any verdict: an erased
    /// step or an oracle label. Controls whether `Check` lines render.
    pub fn has_verdicts(&self) -> bool {
        self.steps
            .iter()
            .any(|s| s.erased || s.oracle_label.is_some())
    }

    /// Check the structural invariants; used by tests and at load time.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let mut expected = 0usize;
        for (pos, step) in self.steps.iter().enumerate() {
            if let Some(p) = step.error_prob {
                if !(0.0..=1.0).contains(&p) {
                    return Err(TrajectoryError::Invalid(format!(
                        "error_prob {p} outside [0,1] at step {pos}"
                    )));
                }
                if step.author == Author::Gold {
                    return Err(TrajectoryError::Invalid(format!(
                        "gold step {pos} carries error_prob"
                    )));
                }
            }
            if step.erased {
                // Retry chains may stack several erased attempts at one
                // index; each must be followed by a same-index step and the
                // chain must end in a non-erased replacement.
                match self.steps.get(pos + 1) {
                    Some(next) if next.index == step.index => {}
                    _ => {
                        return Err(TrajectoryError::Invalid(format!(
                            "erased step at position {pos} lacks a replacement with index {}",
                            step.index
                        )))
                    }
                }
                if step.index != expected {
                    return Err(TrajectoryError::Invalid(format!(
                        "erased step at position {pos} has index {}, expected {expected}",
                        step.index
                    )));
                }
            } else {
                if step.index != expected {
                    return Err(TrajectoryError::Invalid(format!(
                        "non-erased step at position {pos} has index {}, expected {expected}",
                        step.index
                    )));
                }
                expected += 1;
            }
        }
        let last_is_finish = self
            .last_non_erased()
            .map(|s| {
                crate::action::parse_action(&s.action_text)
                    .map(|a| a.is_finish())
                    .unwrap_or(false)
            })
            .unwrap_or(false);
        if self.final_answer.is_some() && !last_is_finish {
            return Err(TrajectoryError::Invalid(
                "final_answer present but last step is not Finish".into(),
            ));
        }
        if self.final_answer.is_none() && self.outcome != Outcome::Unanswered {
            return Err(TrajectoryError::Invalid(
                "outcome graded without a final answer".into(),
            ));
        }
        if self.final_answer.is_some() && self.outcome == Outcome::Unanswered {
            return Err(TrajectoryError::Invalid(
                "final answer present but outcome is unanswered".into(),
            ));
        }
        Ok(())
    }
}

/// Render the canonical text form. With `include_erased`, erased steps are
/// rendered in place and every step gains a `Check` verdict line provided
/// the trajectory carries verdicts.
pub fn serialize_trajectory(traj: &Trajectory, include_erased: bool) -> String {
    let mut out = format!("Question: {}\n", traj.question);
    let verdicts = include_erased && traj.has_verdicts();
    for step in &traj.steps {
        if step.erased && !include_erased {
            continue;
        }
        push_step_lines(&mut out, step);
        if verdicts {
            out.push_str(&verdict_line(step));
        }
    }
    out
}

fn push_step_lines(out: &mut String, step: &Step) {
    out.push_str(&format!("Thought {}: {}\n", step.index, step.thought));
    out.push_str(&format!("Action {}: {}\n", step.index, step.action_text));
    out.push_str(&format!(
        "Observation {}: {}\n",
        step.index, step.observation
    ));
}

fn verdict_line(step: &Step) -> String {
    let verdict = if step.erased { "WRONG" } else { "OK" };
    format!("Check {}: {}\n", step.index, verdict)
}

/// Mark the last non-erased step as erased, producing the revised
/// trajectory. Only the last non-erased step may be erased, so the prompt
/// rendered without erased steps is exactly the prompt that preceded it.
pub fn erase_step(traj: &Trajectory, index: usize) -> Result<Trajectory, TrajectoryError> {
    let last_pos = traj
        .steps
        .iter()
        .rposition(|s| !s.erased)
        .ok_or(TrajectoryError::NothingToErase)?;
    if traj.steps[last_pos].index != index {
        return Err(TrajectoryError::NotLastStep { index });
    }
    let mut next = traj.clone();
    next.steps[last_pos].erased = true;
    // Erasing a Finish step withdraws the answer.
    next.final_answer = None;
    next.outcome = Outcome::Unanswered;
    Ok(next)
}

/// Segment kinds of the training serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Thought,
    Action,
    Observation,
    Verdict,
    Header,
}

/// One contiguous span of the serialized trajectory with its loss mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub text: String,
    #[serde(rename = "mask")]
    pub loss_masked: bool,
    pub kind: SegmentKind,
}

/// A trajectory cut into maskable segments for training export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub question_id: String,
    pub segments: Vec<Segment>,
}

impl TrainingExample {
    /// Concatenation of all segment texts.
    pub fn full_text(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect()
    }
}

/// Cut a trajectory into loss-maskable segments. Observations and the
/// question header are always masked; thoughts and actions of erased steps
/// are masked so the learner sees the mistake without being trained on it;
/// verdict lines stay unmasked so verdict tokens are learnable.
pub fn segment_for_training(traj: &Trajectory) -> TrainingExample {
    let verdicts = traj.has_verdicts();
    let mut segments = vec![Segment {
        text: format!("Question: {}\n", traj.question),
        loss_masked: true,
        kind: SegmentKind::Header,
    }];
    for step in &traj.steps {
        segments.push(Segment {
            text: format!("Thought {}: {}\n", step.index, step.thought),
            loss_masked: step.erased,
            kind: SegmentKind::Thought,
        });
        segments.push(Segment {
            text: format!("Action {}: {}\n", step.index, step.action_text),
            loss_masked: step.erased,
            kind: SegmentKind::Action,
        });
        segments.push(Segment {
            text: format!("Observation {}: {}\n", step.index, step.observation),
            loss_masked: true,
            kind: SegmentKind::Observation,
        });
        if verdicts {
            segments.push(Segment {
                text: verdict_line(step),
                loss_masked: false,
                kind: SegmentKind::Verdict,
            });
        }
    }
    TrainingExample {
        question_id: traj.question_id.clone(),
        segments,
    }
}

// --- JSONL persistence ---

pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<(), TrajectoryError> {
    let display = path.display().to_string();
    let mut file = File::create(path).map_err(|source| TrajectoryError::Io {
        path: display.clone(),
        source,
    })?;
    for traj in trajectories {
        let line = serde_json::to_string(traj).expect("trajectory serializes");
        writeln!(file, "{line}").map_err(|source| TrajectoryError::Io {
            path: display.clone(),
            source,
        })?;
    }
    Ok(())
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>, TrajectoryError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| TrajectoryError::Io {
        path: display.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| TrajectoryError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory =
            serde_json::from_str(&line).map_err(|source| TrajectoryError::Json {
                path: display.clone(),
                line: idx + 1,
                source,
            })?;
        out.push(traj);
    }
    Ok(out)
}

pub fn write_training_examples(
    path: &Path,
    examples: &[TrainingExample],
) -> Result<(), TrajectoryError> {
    let display = path.display().to_string();
    let mut file = File::create(path).map_err(|source| TrajectoryError::Io {
        path: display.clone(),
        source,
    })?;
    for example in examples {
        let line = serde_json::to_string(example).expect("example serializes");
        writeln!(file, "{line}").map_err(|source| TrajectoryError::Io {
            path: display.clone(),
            source,
        })?;
    }
    Ok(())
}
