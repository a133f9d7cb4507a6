//! Rule-based step-correctness labeling for collaborative examination.
//!
//! Math mode gathers the numeric observations of known-correct trajectories
//! into a reference set; a step is labeled correct when its own numeric
//! observation matches any reference value within a relative tolerance.
//! Text mode compares a step's thought/action pair against reference steps
//! through a pluggable equivalence judge; the default judge is a
//! deterministic normalized comparison of the action text, and a remote
//! model can be slotted in behind the same interface.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use num_traits::{One, Signed};
use regex::Regex;
use thiserror::Error;

use crate::expr::{parse_decimal, Rational};
use crate::metrics::TaskKind;
use crate::tools::normalize_text;
use crate::trajectory::{OracleLabel, Outcome, Step, Trajectory};

/// Relative tolerance used when matching decimal renderings of exact
/// values: 1e-6, with an absolute floor at magnitude 1.
pub fn default_tolerance() -> Rational {
    Rational::new(1.into(), 1_000_000.into())
}

/// True when `value` is within `tolerance * max(1, |reference|)` of the
/// reference.
pub fn rationals_match(value: &Rational, reference: &Rational, tolerance: &Rational) -> bool {
    let magnitude = reference.abs();
    let scale = if magnitude > Rational::one() {
        magnitude
    } else {
        Rational::one()
    };
    (value - reference).abs() <= tolerance * scale
}

/// Pull a numeric value out of an observation: either a plain decimal or a
/// solution binding of the form `x = 3`.
pub fn extract_numeric(observation: &str) -> Option<Rational> {
    if let Some(v) = parse_decimal(observation) {
        return Some(v);
    }
    static BINDING: OnceLock<Regex> = OnceLock::new();
    let re = BINDING.get_or_init(|| {
        Regex::new(r"^\s*[A-Za-z_][A-Za-z0-9_]*\s*=\s*(-?\d+(?:\.\d+)?)\s*$").expect("valid regex")
    });
    re.captures(observation)
        .and_then(|c| parse_decimal(c.get(1).expect("group").as_str()))
}

/// Intermediate results (math) or reference steps (text) gathered from
/// correct trajectories.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    pub mode: TaskKind,
    pub values: BTreeSet<Rational>,
    pub reference_steps: Vec<(String, String)>,
    pub tolerance: Rational,
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("no reference trajectories")]
    NoReferenceTrajectories,
    #[error("reference trajectory {0} does not have outcome=correct")]
    ReferenceNotCorrect(String),
}

/// Decides whether a candidate step is semantically equivalent to a
/// reference step.
pub trait EquivalenceJudge: Send + Sync {
    fn equivalent(&self, candidate: (&str, &str), reference: (&str, &str)) -> bool;

    /// Batch form; the default loops over [`EquivalenceJudge::equivalent`].
    fn equivalent_any(&self, candidate: (&str, &str), references: &[(String, String)]) -> bool {
        references
            .iter()
            .any(|(t, a)| self.equivalent(candidate, (t.as_str(), a.as_str())))
    }
}

/// Default judge: normalized-string equality of the action text.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormalizedActionJudge;

impl EquivalenceJudge for NormalizedActionJudge {
    fn equivalent(&self, candidate: (&str, &str), reference: (&str, &str)) -> bool {
        normalize_text(candidate.1) == normalize_text(reference.1)
    }
}

impl ReferenceSet {
    pub fn new(mode: TaskKind) -> Self {
        Self {
            mode,
            values: BTreeSet::new(),
            reference_steps: Vec::new(),
            tolerance: default_tolerance(),
        }
    }

    /// Add the non-erased steps of a correct trajectory to the pool.
    pub fn extend_with(&mut self, trajectory: &Trajectory) {
        for step in trajectory.non_erased_steps() {
            match self.mode {
                TaskKind::Math => {
                    if let Some(v) = extract_numeric(&step.observation) {
                        self.values.insert(v);
                    }
                }
                TaskKind::Text => {
                    let pair = (step.thought.clone(), step.action_text.clone());
                    if !self.reference_steps.contains(&pair) {
                        self.reference_steps.push(pair);
                    }
                }
            }
        }
    }
}

/// Gather intermediate results (or reference steps) from trajectories that
/// reached the correct answer.
pub fn build_reference(
    correct_trajectories: &[Trajectory],
    mode: TaskKind,
) -> Result<ReferenceSet, OracleError> {
    if correct_trajectories.is_empty() {
        return Err(OracleError::NoReferenceTrajectories);
    }
    let mut set = ReferenceSet::new(mode);
    for traj in correct_trajectories {
        if traj.outcome != Outcome::Correct {
            return Err(OracleError::ReferenceNotCorrect(traj.question_id.clone()));
        }
        set.extend_with(traj);
    }
    Ok(set)
}

/// Label one step against the reference set. Math steps without a numeric
/// observation are wrong by definition (non-numeric results cannot match
/// any gathered intermediate).
pub fn check_step(
    step: &Step,
    reference: &ReferenceSet,
    judge: Option<&dyn EquivalenceJudge>,
) -> OracleLabel {
    match reference.mode {
        TaskKind::Math => match extract_numeric(&step.observation) {
            Some(value) => {
                if reference
                    .values
                    .iter()
                    .any(|r| rationals_match(&value, r, &reference.tolerance))
                {
                    OracleLabel::Correct
                } else {
                    OracleLabel::Wrong
                }
            }
            None => OracleLabel::Wrong,
        },
        TaskKind::Text => {
            let default = NormalizedActionJudge;
            let judge = judge.unwrap_or(&default);
            if judge.equivalent_any(
                (&step.thought, &step.action_text),
                &reference.reference_steps,
            ) {
                OracleLabel::Correct
            } else {
                OracleLabel::Wrong
            }
        }
    }
}

/// Apply [`check_step`] to every non-erased step, writing labels in place
/// on a copy. Structure is untouched.
pub fn label_trajectory(
    trajectory: &Trajectory,
    reference: &ReferenceSet,
    judge: Option<&dyn EquivalenceJudge>,
) -> Trajectory {
    let mut out = trajectory.clone();
    for step in out.steps.iter_mut().filter(|s| !s.erased) {
        step.oracle_label = Some(check_step(step, reference, judge));
    }
    out
}
