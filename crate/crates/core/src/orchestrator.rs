//! The collaborative-inference state machine.
//!
//! One run loops: the acting agent generates a step, the action is parsed
//! and executed, the observation is appended. In the reflective modes the
//! local agent then judges its own step and the policy decides; on
//! escalation the step is erased and regenerated, by the cloud agent
//! (adaswitch) or by the local agent itself (self-reflection, bounded
//! retries). Cloud corrections are accepted unconditionally and never
//! reflected upon. The loop ends at an accepted Finish action or at the
//! step budget.
//!
//! Erasure rolls the tool context back to its pre-step snapshot, so a
//! rejected SetEquation or Define leaves no trace. Every agent call is
//! metered into the cost report, including reflection queries (estimated
//! at one generated verdict token).
//!
//! Replay: a batch is fully determined by (global seed, config, fixtures).
//! Per-record seeds are derived by stable-hashing the global seed with the
//! question id, so parallelism cannot change any result.

use std::fs::File;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::parse_action;
use crate::agent::{
    spawn_agent, Agent, AgentEnv, AgentError, AgentProfile, ReflectRequest, StepRequest,
};
use crate::exam::DatasetRecord;
use crate::metrics::{grade_answer, CostReport, TaskKind};
use crate::policy::{decide, Decision, PolicyConfig, PolicyError, PolicyState, StepMeta};
use crate::tools::ToolContext;
use crate::trajectory::{
    erase_step, serialize_trajectory, Author, Outcome, Step, Trajectory, TrajectoryError,
};

/// Inference mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    LocalOnly,
    CloudOnly,
    SelfReflection,
    AdaSwitch,
}

/// Per-run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub mode: InferenceMode,
    pub policy: PolicyConfig,
    /// Bound on accepted (non-erased) steps.
    pub max_steps: u32,
    /// Local regeneration budget per step index, shared between malformed
    /// retries and self-reflection retries.
    pub max_self_retries: u32,
    pub grade_mode: TaskKind,
}

impl InferenceConfig {
    pub fn new(mode: InferenceMode, policy: PolicyConfig) -> Self {
        Self {
            mode,
            policy,
            max_steps: 15,
            max_self_retries: 2,
            grade_mode: TaskKind::Math,
        }
    }
}

/// Everything a run borrows from its surroundings.
#[derive(Clone, Copy)]
pub struct RunContext<'a> {
    pub env: &'a AgentEnv,
    pub local: &'a AgentProfile,
    pub cloud: Option<&'a AgentProfile>,
    pub base_tools: &'a ToolContext,
    pub cfg: &'a InferenceConfig,
}

/// Outcome of one inference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    #[serde(flatten)]
    pub trajectory: Trajectory,
    pub cost: CostReport,
    pub escalation_count: u32,
    /// (step index, wrongness probability) per reflection call, in order.
    pub reflection_flags: Vec<(usize, f64)>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("mode {0:?} requires a cloud profile")]
    MissingCloud(InferenceMode),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A parsed-and-executed step ready to append, plus the updated tools.
pub(crate) struct ExecutedStep {
    pub(crate) step: Step,
    pub(crate) tools: ToolContext,
    pub(crate) token_logprobs: Option<Vec<f64>>,
    pub(crate) finish_answer: Option<String>,
}

/// Generate one step with the given agent and execute its action. Does not
/// retry; malformed generations are surfaced for the caller's retry budget.
pub(crate) fn produce_step(
    agent: &mut dyn Agent,
    author: Author,
    trajectory: &Trajectory,
    tools: &ToolContext,
    record: &DatasetRecord,
    cost: &mut CostReport,
    env: &AgentEnv,
) -> Result<Result<ExecutedStep, String>, AgentError> {
    let context = serialize_trajectory(trajectory, false);
    let prev_observation = trajectory.last_non_erased().map(|s| s.observation.clone());
    let profile = agent.profile().clone();
    let request = StepRequest {
        question_id: &record.question_id,
        question: &record.question,
        context: &context,
        next_index: trajectory.next_index(),
        prev_observation: prev_observation.as_deref(),
        sampling: &profile.sampling,
    };
    let proposal = match agent.generate_step(&request) {
        Ok(p) => p,
        Err(e) if e.is_malformed_step() => {
            // The call still happened; meter the prompt.
            cost.record_call(
                &profile.name,
                profile.param_count,
                env.estimator.count(&context),
                0,
            );
            return Ok(Err(e.to_string()));
        }
        Err(e) => return Err(e),
    };
    cost.record_call(
        &profile.name,
        profile.param_count,
        proposal.prompt_token_count,
        proposal.generated_token_count,
    );
    let index = trajectory.next_index();
    match parse_action(&proposal.action_text) {
        Ok(action) => {
            let (observation, next_tools) = tools.execute(&action);
            let finish_answer = match &action {
                crate::action::Action::Finish(answer) => Some(answer.clone()),
                _ => None,
            };
            Ok(Ok(ExecutedStep {
                step: Step::new(
                    index,
                    author,
                    proposal.thought,
                    proposal.action_text,
                    observation,
                ),
                tools: next_tools,
                token_logprobs: proposal.token_logprobs,
                finish_answer,
            }))
        }
        Err(parse_error) => Ok(Err(format!(
            "{parse_error} in action {:?} (thought {:?})",
            proposal.action_text, proposal.thought
        ))),
    }
}

/// A malformed generation kept after the retry budget: the raw reply stays
/// in the record and the observation carries the tool error.
pub(crate) fn kept_malformed_step(index: usize, author: Author, reason: &str) -> ExecutedStep {
    ExecutedStep {
        step: Step::new(index, author, "", "", format!("error: {reason}")),
        tools: ToolContext::new(), // replaced by the caller's snapshot
        token_logprobs: None,
        finish_answer: None,
    }
}

struct RunState<'a> {
    rc: RunContext<'a>,
    record: &'a DatasetRecord,
    trajectory: Trajectory,
    tools: ToolContext,
    /// Tool context the last accepted step executed from, for erasure.
    tools_before: ToolContext,
    cost: CostReport,
    escalations: u32,
    reflections: Vec<(usize, f64)>,
}

impl<'a> RunState<'a> {
    /// Append a produced step; `executed_from` is the tool snapshot its
    /// action ran against (the rollback point should the step be erased).
    fn accept(&mut self, executed: ExecutedStep, executed_from: ToolContext) {
        self.tools_before = executed_from;
        self.tools = executed.tools;
        if let Some(answer) = executed.finish_answer {
            self.trajectory.final_answer = Some(answer.clone());
            self.trajectory.outcome =
                if grade_answer(&answer, &self.record.answer, self.rc.cfg.grade_mode) {
                    Outcome::Correct
                } else {
                    Outcome::Wrong
                };
        }
        self.trajectory.steps.push(executed.step);
    }

    fn finished(&self) -> bool {
        self.trajectory.final_answer.is_some()
    }

    /// Observation preceding the trajectory's last non-erased step.
    fn prev_observation_for_reflection(&self) -> Option<String> {
        self.trajectory
            .steps
            .iter()
            .rev()
            .filter(|s| !s.erased)
            .nth(1)
            .map(|s| s.observation.clone())
    }
}

/// Run collaborative inference for one dataset record.
///
/// Hard configuration problems (missing cloud profile) are `Err`; backend
/// failures abort the run softly with `outcome = unanswered` and the error
/// recorded on the result.
pub fn run_inference(
    record: &DatasetRecord,
    rc: RunContext<'_>,
    run_seed: u64,
) -> Result<RunResult, OrchestratorError> {
    let cfg = rc.cfg;
    cfg.policy.validate()?;
    if matches!(cfg.mode, InferenceMode::CloudOnly | InferenceMode::AdaSwitch)
        && rc.cloud.is_none()
    {
        return Err(OrchestratorError::MissingCloud(cfg.mode));
    }

    let mut result = RunResult {
        trajectory: Trajectory::new(record.question_id.clone(), record.question.clone()),
        cost: CostReport::default(),
        escalation_count: 0,
        reflection_flags: Vec::new(),
        error: None,
    };

    // Both sessions share the per-record seed: synthetic difficulty draws
    // must coincide across agents for a given (question, index, attempt).
    let mut local = match spawn_agent(rc.local, rc.env, &record.question_id, run_seed) {
        Ok(agent) => agent,
        Err(e) => {
            result.error = Some(e.to_string());
            return Ok(result);
        }
    };
    let mut cloud = match rc.cloud {
        Some(profile) => match spawn_agent(profile, rc.env, &record.question_id, run_seed) {
            Ok(agent) => Some(agent),
            Err(e) => {
                result.error = Some(e.to_string());
                return Ok(result);
            }
        },
        None => None,
    };

    let mut policy_state = cfg.policy.initial_state(run_seed);
    let mut state = RunState {
        rc,
        record,
        trajectory: result.trajectory.clone(),
        tools: rc.base_tools.clone(),
        tools_before: rc.base_tools.clone(),
        cost: CostReport::default(),
        escalations: 0,
        reflections: Vec::new(),
    };

    let run_error = run_loop(&mut state, &mut local, cloud.as_mut(), &mut policy_state);

    result.trajectory = state.trajectory;
    result.cost = state.cost;
    result.escalation_count = state.escalations;
    result.reflection_flags = state.reflections;
    if let Some(message) = run_error {
        result.error = Some(message);
        result.trajectory.final_answer = None;
        result.trajectory.outcome = Outcome::Unanswered;
    }
    Ok(result)
}

/// The inference loop proper. Returns a soft error message when a backend
/// failure aborts the run.
fn run_loop(
    state: &mut RunState<'_>,
    local: &mut Box<dyn Agent>,
    mut cloud: Option<&mut Box<dyn Agent>>,
    policy_state: &mut PolicyState,
) -> Option<String> {
    let cfg = state.rc.cfg;
    let reflective = matches!(
        cfg.mode,
        InferenceMode::SelfReflection | InferenceMode::AdaSwitch
    );
    // One regeneration budget per step index, shared between malformed
    // retries and self-reflection retries.
    let mut budget_index = usize::MAX;
    let mut retries_used = 0u32;

    while state.trajectory.non_erased_len() < cfg.max_steps as usize {
        let index = state.trajectory.next_index();
        if index != budget_index {
            budget_index = index;
            retries_used = 0;
        }
        let author = match cfg.mode {
            InferenceMode::CloudOnly => Author::Cloud,
            _ => Author::Local,
        };

        // Produce one step at this index, spending the budget on
        // malformed generations.
        let executed = loop {
            let agent: &mut dyn Agent = if author == Author::Cloud {
                cloud.as_mut().expect("cloud checked present").as_mut()
            } else {
                local.as_mut()
            };
            match produce_step(
                agent,
                author,
                &state.trajectory,
                &state.tools,
                state.record,
                &mut state.cost,
                state.rc.env,
            ) {
                Ok(Ok(executed)) => break executed,
                Ok(Err(reason)) => {
                    if retries_used < cfg.max_self_retries {
                        retries_used += 1;
                        continue;
                    }
                    log::warn!(
                        "{}: keeping malformed step after {retries_used} retries: {reason}",
                        state.record.question_id
                    );
                    let mut kept = kept_malformed_step(index, author, &reason);
                    kept.tools = state.tools.clone();
                    break kept;
                }
                Err(backend_error) => return Some(backend_error.to_string()),
            }
        };
        let token_logprobs = executed.token_logprobs.clone();
        let executed_from = state.tools.clone();
        state.accept(executed, executed_from);

        // Reflection and the escalation decision apply to local steps in
        // the reflective modes; cloud steps are accepted unconditionally.
        if reflective && author == Author::Local {
            let context = serialize_trajectory(&state.trajectory, false);
            let prev_observation = state.prev_observation_for_reflection();
            let step = state
                .trajectory
                .last_non_erased()
                .expect("step just accepted")
                .clone();
            let request = ReflectRequest {
                question_id: &state.record.question_id,
                question: &state.record.question,
                context: &context,
                step: &step,
                prev_observation: prev_observation.as_deref(),
            };
            let wrongness = match local.reflect(&request) {
                Ok(p) => p.clamp(0.0, 1.0),
                Err(e) => {
                    log::warn!(
                        "{}: reflection failed, treating as 0: {e}",
                        state.record.question_id
                    );
                    0.0
                }
            };
            // One verdict query: prompt plus a single generated token.
            let local_profile = local.profile().clone();
            state.cost.record_call(
                &local_profile.name,
                local_profile.param_count,
                state.rc.env.estimator.count(&context),
                1,
            );
            state.reflections.push((index, wrongness));
            if let Some(last) = state.trajectory.steps.last_mut() {
                last.error_prob = Some(wrongness);
            }

            let meta = StepMeta {
                step_index: index,
                error_prob: Some(wrongness),
                token_logprobs,
            };
            let decision = match decide(&cfg.policy, policy_state, &meta) {
                Ok(d) => d,
                Err(e) => return Some(e.to_string()),
            };

            if decision == Decision::Escalate {
                match cfg.mode {
                    InferenceMode::AdaSwitch => {
                        let cloud_agent: &mut dyn Agent =
                            cloud.as_mut().expect("cloud checked present").as_mut();
                        if let Some(error) = escalate_to_cloud(state, cloud_agent, index) {
                            return Some(error);
                        }
                    }
                    InferenceMode::SelfReflection => {
                        // Regenerate locally while the shared budget lasts;
                        // once exhausted the flagged step stands.
                        if retries_used < cfg.max_self_retries {
                            retries_used += 1;
                            state.trajectory = erase_step(&state.trajectory, index)
                                .expect("last step is erasable");
                            state.tools = state.tools_before.clone();
                            continue;
                        }
                    }
                    _ => unreachable!("reflective modes only"),
                }
            }
        }

        if state.finished() {
            break;
        }
    }
    None
}

/// Erase the flagged step and have the cloud regenerate it once, accepted
/// unconditionally. On a hard cloud failure the pre-erase trajectory is
/// kept and the error is surfaced.
fn escalate_to_cloud(
    state: &mut RunState<'_>,
    cloud: &mut dyn Agent,
    index: usize,
) -> Option<String> {
    let erased = match erase_step(&state.trajectory, index) {
        Ok(t) => t,
        Err(e) => return Some(e.to_string()),
    };
    let rollback = state.tools_before.clone();
    match produce_step(
        cloud,
        Author::Cloud,
        &erased,
        &rollback,
        state.record,
        &mut state.cost,
        state.rc.env,
    ) {
        Ok(Ok(executed)) => {
            state.trajectory = erased;
            state.accept(executed, rollback);
            state.escalations += 1;
            None
        }
        Ok(Err(reason)) => {
            // No cloud retry loop: a malformed correction is kept as a
            // tool-error step, still accepted unconditionally.
            log::warn!(
                "{}: cloud correction malformed, keeping error step: {reason}",
                state.record.question_id
            );
            state.trajectory = erased;
            let mut kept = kept_malformed_step(index, Author::Cloud, &reason);
            kept.tools = rollback.clone();
            state.accept(kept, rollback);
            state.escalations += 1;
            None
        }
        Err(backend_error) => Some(backend_error.to_string()),
    }
}

/// Batch execution options.
#[derive(Debug, Clone, Copy)]
pub struct BatchOptions {
    pub parallelism: usize,
    pub global_seed: u64,
}

/// Batch-level aggregate, the summary row for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_flops: f64,
    pub escalation_rate: f64,
    pub failures: usize,
    pub decisions: u64,
    pub escalations: u64,
    pub total: CostReport,
}

#[derive(Debug, Clone)]
pub struct BatchReport {
    pub results: Vec<RunResult>,
    pub aggregate: Aggregate,
}

/// Per-record seed: a stable hash of the global seed and the question id,
/// so results do not depend on batch order or parallelism.
pub fn record_seed(global_seed: u64, question_id: &str) -> u64 {
    crate::stable_hash(&["run".into(), global_seed.into(), question_id.into()])
}

/// Run one record per dataset row with bounded parallelism. Per-record
/// failures are isolated into their results; the batch itself only fails
/// on configuration errors.
pub fn run_batch(
    records: &[DatasetRecord],
    rc: RunContext<'_>,
    opts: BatchOptions,
) -> Result<BatchReport, OrchestratorError> {
    rc.cfg.policy.validate()?;
    if matches!(
        rc.cfg.mode,
        InferenceMode::CloudOnly | InferenceMode::AdaSwitch
    ) && rc.cloud.is_none()
    {
        return Err(OrchestratorError::MissingCloud(rc.cfg.mode));
    }
    let run_one = |record: &DatasetRecord| -> RunResult {
        let seed = record_seed(opts.global_seed, &record.question_id);
        run_inference(record, rc, seed).expect("config validated above")
    };
    let results: Vec<RunResult> = if opts.parallelism > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.parallelism)
            .build()
            .expect("thread pool");
        pool.install(|| {
            use rayon::prelude::*;
            records.par_iter().map(run_one).collect()
        })
    } else {
        records.iter().map(run_one).collect()
    };
    let aggregate = aggregate_results(&results);
    Ok(BatchReport { results, aggregate })
}

pub fn aggregate_results(results: &[RunResult]) -> Aggregate {
    let n = results.len();
    let correct = results
        .iter()
        .filter(|r| r.trajectory.outcome == Outcome::Correct)
        .count();
    let failures = results.iter().filter(|r| r.error.is_some()).count();
    let mut total = CostReport::default();
    let mut decisions = 0u64;
    let mut escalations = 0u64;
    for result in results {
        total.merge(&result.cost);
        decisions += result.reflection_flags.len() as u64;
        escalations += u64::from(result.escalation_count);
    }
    Aggregate {
        n,
        correct,
        accuracy: if n > 0 { correct as f64 / n as f64 } else { 0.0 },
        mean_flops: if n > 0 {
            total.total_flops / n as f64
        } else {
            0.0
        },
        escalation_rate: if decisions > 0 {
            escalations as f64 / decisions as f64
        } else {
            0.0
        },
        failures,
        decisions,
        escalations,
        total,
    }
}

/// Write run results as JSONL: the trajectory persistence format extended
/// with cost, escalation, and reflection fields. No timestamps.
pub fn write_run_results(path: &Path, results: &[RunResult]) -> Result<(), OrchestratorError> {
    let display = path.display().to_string();
    let mut file = File::create(path).map_err(|source| OrchestratorError::Io {
        path: display.clone(),
        source,
    })?;
    for result in results {
        let line = serde_json::to_string(result).expect("result serializes");
        writeln!(file, "{line}").map_err(|source| OrchestratorError::Io {
            path: display.clone(),
            source,
        })?;
    }
    Ok(())
}

pub fn read_run_results(path: &Path) -> Result<Vec<RunResult>, OrchestratorError> {
    let display = path.display().to_string();
    let content = std::fs::read_to_string(path).map_err(|source| OrchestratorError::Io {
        path: display.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for line in content.lines().filter(|l| !l.trim().is_empty()) {
        let result: RunResult = serde_json::from_str(line).map_err(|source| {
            OrchestratorError::Io {
                path: display.clone(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, source),
            }
        })?;
        out.push(result);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{AgentRole, BackendConfig, SamplingParams, SyntheticAgentConfig};
    use crate::synth::{dataset_records, gen_synthetic_tasks, SyntheticTaskSet};
    use std::sync::Arc;

    fn synthetic_profile(
        name: &str,
        role: AgentRole,
        params: u64,
        error: f64,
        detect: f64,
        alarm: f64,
        seed: u64,
    ) -> AgentProfile {
        AgentProfile {
            name: name.into(),
            role,
            param_count: params,
            backend: BackendConfig::Synthetic(SyntheticAgentConfig {
                step_error_rate: error,
                detect_rate_when_wrong: detect,
                false_alarm_rate_when_correct: alarm,
                seed,
                tokens_per_step: 16,
                tasks_path: None,
            }),
            sampling: SamplingParams::default(),
        }
    }

    struct Fixture {
        env: AgentEnv,
        records: Vec<DatasetRecord>,
        tools: ToolContext,
    }

    fn fixture(count: usize, n_steps: usize, seed: u64) -> Fixture {
        let tasks = gen_synthetic_tasks(count, n_steps, 10_000, seed);
        let records = dataset_records(&tasks);
        let env = AgentEnv::new().with_tasks(SyntheticTaskSet::from_tasks(tasks));
        Fixture {
            env,
            records,
            tools: ToolContext::new(),
        }
    }

    fn run_ctx<'a>(
        f: &'a Fixture,
        local: &'a AgentProfile,
        cloud: Option<&'a AgentProfile>,
        cfg: &'a InferenceConfig,
    ) -> RunContext<'a> {
        RunContext {
            env: &f.env,
            local,
            cloud,
            base_tools: &f.tools,
            cfg,
        }
    }

    #[test]
    fn local_only_flawless_agent_solves_the_task() {
        let f = fixture(3, 3, 1);
        let local = synthetic_profile("local", AgentRole::Local, 1_000, 0.0, 1.0, 0.0, 2);
        let cfg = InferenceConfig::new(InferenceMode::LocalOnly, PolicyConfig::Never);
        for record in &f.records {
            let result = run_inference(record, run_ctx(&f, &local, None, &cfg), 7).unwrap();
            assert_eq!(result.trajectory.outcome, Outcome::Correct, "{record:?}");
            assert_eq!(result.escalation_count, 0);
            assert!(result.reflection_flags.is_empty());
            assert_eq!(result.trajectory.non_erased_len(), 4); // 3 chain + finish
            result.trajectory.validate().unwrap();
            assert!(result.cost.per_agent.contains_key("local"));
        }
    }

    #[test]
    fn adaswitch_perfect_detection_recovers_every_error() {
        let f = fixture(40, 5, 3);
        let local = synthetic_profile("local", AgentRole::Local, 1_000, 1.0, 1.0, 0.0, 2);
        let cloud = synthetic_profile("cloud", AgentRole::Cloud, 30_000, 0.0, 1.0, 0.0, 3);
        let cfg = InferenceConfig::new(
            InferenceMode::AdaSwitch,
            PolicyConfig::Adaptive { p: 0.5 },
        );
        for record in &f.records {
            let result =
                run_inference(record, run_ctx(&f, &local, Some(&cloud), &cfg), 11).unwrap();
            assert_eq!(result.trajectory.outcome, Outcome::Correct);
            // Every chain step was corrupted, detected, and replaced; the
            // finish echo is never corrupted so never escalates here.
            assert_eq!(result.escalation_count, 5);
            let cloud_steps = result
                .trajectory
                .non_erased_steps()
                .filter(|s| s.author == Author::Cloud)
                .count();
            assert_eq!(cloud_steps as u32, result.escalation_count);
            result.trajectory.validate().unwrap();
        }
    }

    #[test]
    fn adaswitch_with_always_policy_yields_cloud_steps_only() {
        let f = fixture(10, 4, 5);
        let local = synthetic_profile("local", AgentRole::Local, 1_000, 0.2, 0.9, 0.1, 2);
        let cloud = synthetic_profile("cloud", AgentRole::Cloud, 30_000, 0.0, 1.0, 0.0, 3);
        let cfg = InferenceConfig::new(InferenceMode::AdaSwitch, PolicyConfig::Always);
        for record in &f.records {
            let result =
                run_inference(record, run_ctx(&f, &local, Some(&cloud), &cfg), 9).unwrap();
            assert!(result
                .trajectory
                .non_erased_steps()
                .all(|s| s.author == Author::Cloud));
            assert_eq!(
                result.escalation_count as usize,
                result.trajectory.non_erased_len()
            );
            result.trajectory.validate().unwrap();
        }
    }

    #[test]
    fn adaswitch_with_never_policy_matches_local_only_text() {
        let f = fixture(20, 4, 5);
        let local = synthetic_profile("local", AgentRole::Local, 1_000, 0.4, 0.9, 0.1, 2);
        let cloud = synthetic_profile("cloud", AgentRole::Cloud, 30_000, 0.0, 1.0, 0.0, 3);
        let never = InferenceConfig::new(InferenceMode::AdaSwitch, PolicyConfig::Never);
        let local_only = InferenceConfig::new(InferenceMode::LocalOnly, PolicyConfig::Never);
        for record in &f.records {
            let a = run_inference(record, run_ctx(&f, &local, Some(&cloud), &never), 9).unwrap();
            let b = run_inference(record, run_ctx(&f, &local, None, &local_only), 9).unwrap();
            assert_eq!(
                serialize_trajectory(&a.trajectory, true),
                serialize_trajectory(&b.trajectory, true)
            );
            assert_eq!(a.trajectory.outcome, b.trajectory.outcome);
            assert_eq!(a.escalation_count, 0);
        }
    }

    #[test]
    fn self_reflection_retries_locally_and_can_recover() {
        let f = fixture(200, 4, 7);
        // Moderate error rate, perfect detection: retries get fresh draws.
        let local = synthetic_profile("local", AgentRole::Local, 1_000, 0.3, 1.0, 0.0, 2);
        let self_cfg = InferenceConfig::new(
            InferenceMode::SelfReflection,
            PolicyConfig::Adaptive { p: 0.5 },
        );
        let local_cfg = InferenceConfig::new(InferenceMode::LocalOnly, PolicyConfig::Never);
        let mut self_correct = 0;
        let mut local_correct = 0;
        for record in &f.records {
            let seed = record_seed(17, &record.question_id);
            let a = run_inference(record, run_ctx(&f, &local, None, &self_cfg), seed).unwrap();
            let b = run_inference(record, run_ctx(&f, &local, None, &local_cfg), seed).unwrap();
            a.trajectory.validate().unwrap();
            self_correct += usize::from(a.trajectory.outcome == Outcome::Correct);
            local_correct += usize::from(b.trajectory.outcome == Outcome::Correct);
            assert_eq!(a.escalation_count, 0, "self-reflection never uses the cloud");
        }
        assert!(
            self_correct > local_correct,
            "self-reflection should beat plain local ({self_correct} vs {local_correct})"
        );
    }

    #[test]
    fn erased_steps_roll_back_tool_state() {
        // A scripted local sets a bogus equation, flags itself, and the
        // cloud replaces the step; the bogus equation must not survive.
        use crate::agent::{ScriptedConfig, ScriptedEntry, ScriptedFixture};
        let entries_local = vec![
            ScriptedEntry {
                question_id: "q1".into(),
                step_index: 0,
                thought: "set a wrong equation".into(),
                action: "SetEquation(x+1=99)".into(),
                reflect_prob: Some(1.0),
            },
            ScriptedEntry {
                question_id: "q1".into(),
                step_index: 1,
                thought: "solve".into(),
                action: "SolveEquation(x)".into(),
                reflect_prob: Some(0.0),
            },
            ScriptedEntry {
                question_id: "q1".into(),
                step_index: 2,
                thought: "finish".into(),
                action: "Finish(4)".into(),
                reflect_prob: Some(0.0),
            },
        ];
        let entries_cloud = vec![ScriptedEntry {
            question_id: "q1".into(),
            step_index: 0,
            thought: "set the right equation".into(),
            action: "SetEquation(x+1=5)".into(),
            reflect_prob: None,
        }];
        let mut env = AgentEnv::new();
        env.insert_scripted(
            "local",
            Arc::new(ScriptedFixture::from_entries(entries_local)),
        );
        env.insert_scripted(
            "cloud",
            Arc::new(ScriptedFixture::from_entries(entries_cloud)),
        );
        let scripted = |name: &str, role| AgentProfile {
            name: name.into(),
            role,
            param_count: 10,
            backend: BackendConfig::Scripted(ScriptedConfig {
                fixture_path: "unused".into(),
            }),
            sampling: SamplingParams::default(),
        };
        let local = scripted("local", AgentRole::Local);
        let cloud = scripted("cloud", AgentRole::Cloud);
        let record = DatasetRecord {
            question_id: "q1".into(),
            question: "Q".into(),
            rationale: String::new(),
            answer: "4".into(),
        };
        let cfg = InferenceConfig::new(
            InferenceMode::AdaSwitch,
            PolicyConfig::Adaptive { p: 0.5 },
        );
        let tools = ToolContext::new();
        let rc = RunContext {
            env: &env,
            local: &local,
            cloud: Some(&cloud),
            base_tools: &tools,
            cfg: &cfg,
        };
        let result = run_inference(&record, rc, 1).unwrap();
        let solve = result
            .trajectory
            .non_erased_steps()
            .find(|s| s.action_text.starts_with("SolveEquation"))
            .expect("solve step present");
        // x solves against the cloud's corrected equation, not the erased one.
        assert_eq!(solve.observation, "x = 4");
        assert_eq!(result.trajectory.outcome, Outcome::Correct);
        assert_eq!(result.escalation_count, 1);
        result.trajectory.validate().unwrap();
    }

    #[test]
    fn backend_error_aborts_softly() {
        let f = fixture(1, 3, 9);
        let local = synthetic_profile("local", AgentRole::Local, 1_000, 0.0, 1.0, 0.0, 2);
        let cfg = InferenceConfig::new(InferenceMode::LocalOnly, PolicyConfig::Never);
        let missing = DatasetRecord {
            question_id: "not-a-task".into(),
            question: "Q".into(),
            rationale: String::new(),
            answer: "1".into(),
        };
        let result = run_inference(&missing, run_ctx(&f, &local, None, &cfg), 3).unwrap();
        assert!(result.error.is_some());
        assert_eq!(result.trajectory.outcome, Outcome::Unanswered);
    }

    #[test]
    fn missing_cloud_is_a_configuration_error() {
        let f = fixture(1, 3, 9);
        let local = synthetic_profile("local", AgentRole::Local, 1_000, 0.0, 1.0, 0.0, 2);
        let cfg = InferenceConfig::new(InferenceMode::AdaSwitch, PolicyConfig::Always);
        let err = run_inference(&f.records[0], run_ctx(&f, &local, None, &cfg), 3);
        assert!(matches!(err, Err(OrchestratorError::MissingCloud(_))));
    }

    #[test]
    fn step_budget_bounds_generation_calls() {
        let f = fixture(30, 5, 21);
        let local = synthetic_profile("local", AgentRole::Local, 1_000, 0.5, 0.9, 0.2, 2);
        let cloud = synthetic_profile("cloud", AgentRole::Cloud, 30_000, 0.1, 1.0, 0.0, 3);
        for (mode, policy) in [
            (InferenceMode::AdaSwitch, PolicyConfig::Adaptive { p: 0.5 }),
            (
                InferenceMode::SelfReflection,
                PolicyConfig::Adaptive { p: 0.5 },
            ),
        ] {
            let cfg = InferenceConfig::new(mode, policy);
            for record in &f.records {
                let result =
                    run_inference(record, run_ctx(&f, &local, Some(&cloud), &cfg), 5).unwrap();
                let generation_calls: u64 = result
                    .cost
                    .per_agent
                    .values()
                    .map(|c| c.calls)
                    .sum::<u64>()
                    - result.reflection_flags.len() as u64;
                let bound = u64::from(cfg.max_steps) * u64::from(1 + cfg.max_self_retries)
                    + u64::from(result.escalation_count);
                assert!(
                    generation_calls <= bound,
                    "{generation_calls} > {bound} in {mode:?}"
                );
                result.trajectory.validate().unwrap();
            }
        }
    }

    #[test]
    fn batch_is_order_stable_and_parallelism_invariant() {
        let f = fixture(100, 4, 33);
        let local = synthetic_profile("local", AgentRole::Local, 1_000, 0.3, 0.9, 0.1, 2);
        let cloud = synthetic_profile("cloud", AgentRole::Cloud, 30_000, 0.05, 1.0, 0.0, 3);
        let cfg = InferenceConfig::new(
            InferenceMode::AdaSwitch,
            PolicyConfig::Adaptive { p: 0.5 },
        );
        let rc = run_ctx(&f, &local, Some(&cloud), &cfg);
        let serial = run_batch(
            &f.records,
            rc,
            BatchOptions {
                parallelism: 1,
                global_seed: 17,
            },
        )
        .unwrap();
        let parallel = run_batch(
            &f.records,
            rc,
            BatchOptions {
                parallelism: 8,
                global_seed: 17,
            },
        )
        .unwrap();
        assert_eq!(serial.results, parallel.results);
        assert_eq!(serial.aggregate, parallel.aggregate);
        for (record, result) in f.records.iter().zip(&serial.results) {
            assert_eq!(record.question_id, result.trajectory.question_id);
        }
    }

    #[test]
    fn batch_isolates_per_record_failures() {
        let f = fixture(5, 3, 41);
        let mut records = f.records.clone();
        records.insert(
            2,
            DatasetRecord {
                question_id: "missing-task".into(),
                question: "Q".into(),
                rationale: String::new(),
                answer: "1".into(),
            },
        );
        let local = synthetic_profile("local", AgentRole::Local, 1_000, 0.0, 1.0, 0.0, 2);
        let cfg = InferenceConfig::new(InferenceMode::LocalOnly, PolicyConfig::Never);
        let report = run_batch(
            &records,
            run_ctx(&f, &local, None, &cfg),
            BatchOptions {
                parallelism: 2,
                global_seed: 1,
            },
        )
        .unwrap();
        assert_eq!(report.results.len(), 6);
        assert_eq!(report.aggregate.failures, 1);
        assert_eq!(report.aggregate.correct, 5);
        assert!(report.results[2].error.is_some());
    }

    #[test]
    fn empty_batch_is_empty() {
        let f = fixture(1, 3, 2);
        let local = synthetic_profile("local", AgentRole::Local, 1_000, 0.0, 1.0, 0.0, 2);
        let cfg = InferenceConfig::new(InferenceMode::LocalOnly, PolicyConfig::Never);
        let report = run_batch(
            &[],
            run_ctx(&f, &local, None, &cfg),
            BatchOptions {
                parallelism: 4,
                global_seed: 1,
            },
        )
        .unwrap();
        assert!(report.results.is_empty());
        assert_eq!(report.aggregate.total.total_flops, 0.0);
    }

    #[test]
    fn cost_additivity_across_the_batch() {
        let f = fixture(25, 4, 51);
        let local = synthetic_profile("local", AgentRole::Local, 1_000, 0.2, 0.9, 0.1, 2);
        let cloud = synthetic_profile("cloud", AgentRole::Cloud, 30_000, 0.0, 1.0, 0.0, 3);
        let cfg = InferenceConfig::new(
            InferenceMode::AdaSwitch,
            PolicyConfig::Adaptive { p: 0.5 },
        );
        let report = run_batch(
            &f.records,
            run_ctx(&f, &local, Some(&cloud), &cfg),
            BatchOptions {
                parallelism: 3,
                global_seed: 5,
            },
        )
        .unwrap();
        let summed: f64 = report.results.iter().map(|r| r.cost.total_flops).sum();
        assert!((summed - report.aggregate.total.total_flops).abs() < 1e-6);
    }

    #[test]
    fn run_results_round_trip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.jsonl");
        let f = fixture(4, 3, 61);
        let local = synthetic_profile("local", AgentRole::Local, 1_000, 0.3, 1.0, 0.0, 2);
        let cloud = synthetic_profile("cloud", AgentRole::Cloud, 30_000, 0.0, 1.0, 0.0, 3);
        let cfg = InferenceConfig::new(
            InferenceMode::AdaSwitch,
            PolicyConfig::Adaptive { p: 0.5 },
        );
        let report = run_batch(
            &f.records,
            run_ctx(&f, &local, Some(&cloud), &cfg),
            BatchOptions {
                parallelism: 1,
                global_seed: 3,
            },
        )
        .unwrap();
        write_run_results(&path, &report.results).unwrap();
        let back = read_run_results(&path).unwrap();
        assert_eq!(back, report.results);
        // The flattened trajectory keeps its persistence field names.
        let first_line = std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string();
        let json: serde_json::Value = serde_json::from_str(&first_line).unwrap();
        for key in ["question_id", "steps", "outcome", "cost", "escalation_count"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }
}
