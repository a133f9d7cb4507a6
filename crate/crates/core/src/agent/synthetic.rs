//! Seeded synthetic agent over arithmetic-chain tasks.
//!
//! Generation follows the task chain from the previous observation, so an
//! uncorrected mistake propagates to the final answer. A step is corrupted
//! when its shared difficulty draw falls below the agent's error rate: the
//! draw depends on the question, the step index, and the attempt, but not
//! on the agent, so a 5%-error cloud agent fails on a subset of the steps a
//! 30%-error local agent fails on. That models steps being objectively hard
//! rather than errors being independent coin flips, and it is what makes
//! cloud corrections imperfect exactly where the local agent struggled.
//!
//! Corruption adds a half-integer offset (0.5..=8.5) to the step
//! expression, so a corrupted result is never an integer chain value and
//! the oracle's tolerance can never absorb it. The terminal Finish step
//! echoes the previous observation and is never corrupted.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::expr::{parse_decimal, render_decimal, Rational};
use crate::hashing::hash01;
use crate::metrics::TokenEstimator;
use crate::synth::{ChainOp, SyntheticTask};

use super::{Agent, AgentError, AgentProfile, ReflectRequest, StepProposal, StepRequest};

/// Desk-scale stand-in for a trained agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAgentConfig {
    /// Probability that a chain step is corrupted.
    pub step_error_rate: f64,
    /// Probability that reflection flags a corrupted step.
    pub detect_rate_when_wrong: f64,
    /// Probability that reflection flags a correct step.
    pub false_alarm_rate_when_correct: f64,
    pub seed: u64,
    pub tokens_per_step: u32,
    /// Task registry file; optional when the registry is provided in memory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tasks_path: Option<PathBuf>,
}

/// Token probability emitted for steps the agent got right / corrupted.
/// Gives the confidence policy a usable but imperfect signal.
const CONFIDENT_TOKEN_PROB: f64 = 0.9;
const HESITANT_TOKEN_PROB: f64 = 0.55;

pub(super) struct SyntheticSession {
    profile: AgentProfile,
    cfg: SyntheticAgentConfig,
    task: SyntheticTask,
    session_seed: u64,
    generation_attempts: HashMap<usize, u64>,
    reflect_calls: u64,
    estimator: Arc<dyn TokenEstimator>,
}

impl SyntheticSession {
    pub(super) fn new(
        profile: AgentProfile,
        cfg: SyntheticAgentConfig,
        task: SyntheticTask,
        session_seed: u64,
        estimator: Arc<dyn TokenEstimator>,
    ) -> Self {
        Self {
            profile,
            cfg,
            task,
            session_seed,
            generation_attempts: HashMap::new(),
            reflect_calls: 0,
            estimator,
        }
    }

    /// Previous value as canonical decimal text: the request's observation
    /// when it parses, else the true chain value.
    fn base_value_text(&self, request: &StepRequest<'_>) -> String {
        if request.next_index == 0 {
            return self.task.start.to_string();
        }
        request
            .prev_observation
            .and_then(parse_decimal)
            .map(|v| render_decimal(&v))
            .unwrap_or_else(|| self.task.values[request.next_index - 1].to_string())
    }

    fn proposal(
        &self,
        thought: String,
        action_text: String,
        context: &str,
        confident: bool,
    ) -> StepProposal {
        let tokens = u64::from(self.cfg.tokens_per_step);
        let prob = if confident {
            CONFIDENT_TOKEN_PROB
        } else {
            HESITANT_TOKEN_PROB
        };
        StepProposal {
            thought,
            action_text,
            token_logprobs: Some(vec![prob.ln(); tokens as usize]),
            prompt_token_count: self.estimator.count(context),
            generated_token_count: tokens,
        }
    }

    fn expected_observation(&self, step_index: usize, prev: Option<&str>) -> Option<Rational> {
        if step_index >= self.task.n_steps {
            // Finish echoes the previous observation.
            return prev.and_then(parse_decimal);
        }
        let base = if step_index == 0 {
            parse_decimal(&self.task.start.to_string())?
        } else {
            prev.and_then(parse_decimal)?
        };
        let link = self.task.chain[step_index];
        let operand = parse_decimal(&link.operand.to_string())?;
        Some(match link.op {
            ChainOp::Add => base + operand,
            ChainOp::Sub => base - operand,
            ChainOp::Mul => base * operand,
        })
    }
}

impl Agent for SyntheticSession {
    fn profile(&self) -> &AgentProfile {
        &self.profile
    }

    fn generate_step(&mut self, request: &StepRequest<'_>) -> Result<StepProposal, AgentError> {
        let index = request.next_index;
        let attempt = {
            let counter = self.generation_attempts.entry(index).or_insert(0);
            let current = *counter;
            *counter += 1;
            current
        };

        if index >= self.task.n_steps {
            let answer = self.base_value_text(request);
            return Ok(self.proposal(
                "Report the final result.".into(),
                format!("Finish({answer})"),
                request.context,
                true,
            ));
        }

        let link = self.task.chain[index];
        let base = self.base_value_text(request);
        let mut expression = self.task.step_expression(index, &base);
        // Shared difficulty draw: no agent seed, so stronger and weaker
        // agents fail on nested subsets of steps.
        let difficulty = hash01(&[
            "difficulty".into(),
            self.session_seed.into(),
            index.into(),
            attempt.into(),
        ]);
        let corrupted = difficulty < self.cfg.step_error_rate;
        if corrupted {
            let k = crate::hashing::stable_hash(&[
                "delta".into(),
                self.cfg.seed.into(),
                self.session_seed.into(),
                index.into(),
                attempt.into(),
            ]) % 9;
            expression = format!("{expression}+{k}.5");
        }
        let verb = match link.op {
            ChainOp::Add => "add",
            ChainOp::Sub => "subtract",
            ChainOp::Mul => "multiply by",
        };
        Ok(self.proposal(
            format!("Take {base} and {verb} {}.", link.operand),
            format!("Calculator({expression})"),
            request.context,
            !corrupted,
        ))
    }

    fn reflect(&mut self, request: &ReflectRequest<'_>) -> Result<f64, AgentError> {
        let call = self.reflect_calls;
        self.reflect_calls += 1;
        let expected = self.expected_observation(request.step.index, request.prev_observation);
        let actual = parse_decimal(&request.step.observation);
        let corrupted = match (expected, actual) {
            (Some(e), Some(a)) => e != a,
            _ => true,
        };
        let draw = hash01(&[
            "reflect".into(),
            self.cfg.seed.into(),
            self.session_seed.into(),
            call.into(),
        ]);
        let flagged = if corrupted {
            draw < self.cfg.detect_rate_when_wrong
        } else {
            draw < self.cfg.false_alarm_rate_when_correct
        };
        Ok(if flagged { 1.0 } else { 0.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{spawn_agent, AgentEnv, AgentRole, BackendConfig, SamplingParams};
    use super::*;
    use crate::expr::eval_expression;
    use crate::synth::{gen_synthetic_tasks, SyntheticTaskSet};
    use crate::trajectory::{Author, Step};

    fn profile(error: f64, detect: f64, alarm: f64, seed: u64) -> AgentProfile {
        AgentProfile {
            name: "synthetic".into(),
            role: AgentRole::Local,
            param_count: 1_000_000,
            backend: BackendConfig::Synthetic(SyntheticAgentConfig {
                step_error_rate: error,
                detect_rate_when_wrong: detect,
                false_alarm_rate_when_correct: alarm,
                seed,
                tokens_per_step: 8,
                tasks_path: None,
            }),
            sampling: SamplingParams::default(),
        }
    }

    fn env_with_tasks(n: usize) -> (AgentEnv, Arc<SyntheticTaskSet>) {
        let tasks = SyntheticTaskSet::from_tasks(gen_synthetic_tasks(n, 4, 10_000, 5));
        (AgentEnv::new().with_tasks(tasks.clone()), tasks)
    }

    fn request<'a>(
        task: &'a SyntheticTask,
        context: &'a str,
        index: usize,
        prev: Option<&'a str>,
        sampling: &'a SamplingParams,
    ) -> StepRequest<'a> {
        StepRequest {
            question_id: &task.question_id,
            question: &task.question,
            context,
            next_index: index,
            prev_observation: prev,
            sampling,
        }
    }

    #[test]
    fn zero_error_rate_reproduces_true_chain() {
        let (env, tasks) = env_with_tasks(5);
        let sampling = SamplingParams::default();
        for task in tasks.iter() {
            let mut agent = spawn_agent(&profile(0.0, 1.0, 0.0, 3), &env, &task.question_id, 7)
                .unwrap();
            let mut prev: Option<String> = None;
            for i in 0..task.n_steps {
                let req = request(task, "Question: x\n", i, prev.as_deref(), &sampling);
                let proposal = agent.generate_step(&req).unwrap();
                let expr = proposal
                    .action_text
                    .strip_prefix("Calculator(")
                    .and_then(|s| s.strip_suffix(')'))
                    .unwrap();
                let value = eval_expression(expr).unwrap();
                assert_eq!(render_decimal(&value), task.values[i + 1].to_string());
                prev = Some(render_decimal(&value));
            }
            let req = request(task, "Question: x\n", task.n_steps, prev.as_deref(), &sampling);
            let finish = agent.generate_step(&req).unwrap();
            assert_eq!(finish.action_text, format!("Finish({})", task.answer));
        }
    }

    #[test]
    fn full_error_rate_always_misses_true_value() {
        let (env, tasks) = env_with_tasks(5);
        let sampling = SamplingParams::default();
        for task in tasks.iter() {
            let mut agent = spawn_agent(&profile(1.0, 1.0, 0.0, 3), &env, &task.question_id, 9)
                .unwrap();
            let req = request(task, "Question: x\n", 0, None, &sampling);
            let proposal = agent.generate_step(&req).unwrap();
            let expr = proposal
                .action_text
                .strip_prefix("Calculator(")
                .and_then(|s| s.strip_suffix(')'))
                .unwrap();
            let value = eval_expression(expr).unwrap();
            assert_ne!(render_decimal(&value), task.values[1].to_string());
            // Corruption offsets are half-integers: never on the chain.
            assert!(!value.is_integer());
        }
    }

    #[test]
    fn same_seed_fresh_agents_are_identical() {
        let (env, tasks) = env_with_tasks(1);
        let task = tasks.iter().next().unwrap();
        let sampling = SamplingParams::default();
        let p = profile(0.5, 0.8, 0.1, 11);
        let run = || {
            let mut agent = spawn_agent(&p, &env, &task.question_id, 42).unwrap();
            let mut out = Vec::new();
            let mut prev: Option<String> = None;
            for i in 0..=task.n_steps {
                let req = request(task, "Question: x\n", i, prev.as_deref(), &sampling);
                let proposal = agent.generate_step(&req).unwrap();
                prev = Some(task.values.get(i + 1).map(|v| v.to_string()).unwrap_or_default());
                out.push(proposal);
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn corruption_rate_matches_epsilon() {
        let (env, tasks) = env_with_tasks(600);
        let sampling = SamplingParams::default();
        let p = profile(0.3, 1.0, 0.0, 13);
        let mut corrupted = 0usize;
        let mut total = 0usize;
        for (i, task) in tasks.iter().enumerate() {
            let mut agent = spawn_agent(&p, &env, &task.question_id, i as u64).unwrap();
            let mut prev = task.start.to_string();
            for idx in 0..task.n_steps {
                let req = request(task, "Question: x\n", idx, Some(&prev), &sampling);
                let proposal = agent.generate_step(&req).unwrap();
                let expr = proposal
                    .action_text
                    .strip_prefix("Calculator(")
                    .and_then(|s| s.strip_suffix(')'))
                    .unwrap();
                let value = eval_expression(expr).unwrap();
                if render_decimal(&value) != task.values[idx + 1].to_string() {
                    corrupted += 1;
                }
                total += 1;
                prev = task.values[idx + 1].to_string();
            }
        }
        let rate = corrupted as f64 / total as f64;
        assert!((rate - 0.3).abs() < 0.02, "rate {rate} over {total} steps");
    }

    #[test]
    fn perfect_detector_reflects_exactly() {
        let (env, tasks) = env_with_tasks(1);
        let task = tasks.iter().next().unwrap();
        let mut agent = spawn_agent(&profile(0.0, 1.0, 0.0, 3), &env, &task.question_id, 1)
            .unwrap();

        let good = Step::new(
            0,
            Author::Local,
            "t",
            "Calculator(x)",
            task.values[1].to_string(),
        );
        let req = ReflectRequest {
            question_id: &task.question_id,
            question: &task.question,
            context: "Question: x\n",
            step: &good,
            prev_observation: None,
        };
        assert_eq!(agent.reflect(&req).unwrap(), 0.0);

        let bad = Step::new(
            0,
            Author::Local,
            "t",
            "Calculator(x)",
            format!("{}.5", task.values[1]),
        );
        let req = ReflectRequest {
            question_id: &task.question_id,
            question: &task.question,
            context: "Question: x\n",
            step: &bad,
            prev_observation: None,
        };
        assert_eq!(agent.reflect(&req).unwrap(), 1.0);
    }

    #[test]
    fn reflection_rates_match_configuration() {
        let (env, tasks) = env_with_tasks(400);
        let p = profile(0.0, 0.8, 0.1, 17);
        let mut wrong_flags = 0usize;
        let mut wrong_total = 0usize;
        let mut correct_flags = 0usize;
        let mut correct_total = 0usize;
        for (i, task) in tasks.iter().enumerate() {
            let mut agent = spawn_agent(&p, &env, &task.question_id, 1000 + i as u64).unwrap();
            for idx in 0..task.n_steps.min(4) {
                let prev = task.values[idx].to_string();
                for wrong in [false, true] {
                    let obs = if wrong {
                        format!("{}.5", task.values[idx + 1])
                    } else {
                        task.values[idx + 1].to_string()
                    };
                    let step = Step::new(idx, Author::Local, "t", "Calculator(x)", obs);
                    let req = ReflectRequest {
                        question_id: &task.question_id,
                        question: &task.question,
                        context: "Question: x\n",
                        step: &step,
                        prev_observation: Some(&prev),
                    };
                    let flagged = agent.reflect(&req).unwrap() == 1.0;
                    if wrong {
                        wrong_total += 1;
                        wrong_flags += usize::from(flagged);
                    } else {
                        correct_total += 1;
                        correct_flags += usize::from(flagged);
                    }
                }
            }
        }
        assert!(wrong_total >= 10_000 / 8, "enough samples");
        let detect = wrong_flags as f64 / wrong_total as f64;
        let alarm = correct_flags as f64 / correct_total as f64;
        assert!((detect - 0.8).abs() < 0.02, "detect {detect}");
        assert!((alarm - 0.1).abs() < 0.02, "alarm {alarm}");
    }

    #[test]
    fn difficulty_is_shared_between_agents_of_different_strength() {
        let (env, tasks) = env_with_tasks(300);
        let sampling = SamplingParams::default();
        let strong = profile(0.05, 1.0, 0.0, 100);
        let weak = profile(0.3, 1.0, 0.0, 200);
        let mut strong_wrong_but_weak_right = 0usize;
        for (i, task) in tasks.iter().enumerate() {
            let seed = i as u64;
            let mut a = spawn_agent(&strong, &env, &task.question_id, seed).unwrap();
            let mut b = spawn_agent(&weak, &env, &task.question_id, seed).unwrap();
            for idx in 0..task.n_steps {
                let prev = task.values[idx].to_string();
                let truth = task.values[idx + 1].to_string();
                let is_wrong = |agent: &mut Box<dyn Agent>| {
                    let req = request(task, "Question: x\n", idx, Some(&prev), &sampling);
                    let proposal = agent.generate_step(&req).unwrap();
                    let expr = proposal
                        .action_text
                        .strip_prefix("Calculator(")
                        .and_then(|s| s.strip_suffix(')'))
                        .unwrap();
                    render_decimal(&eval_expression(expr).unwrap()) != truth
                };
                if is_wrong(&mut a) && !is_wrong(&mut b) {
                    strong_wrong_but_weak_right += 1;
                }
            }
        }
        // Nested failure sets: the 5% agent never fails where the 30% one
        // succeeds (same question, index, attempt).
        assert_eq!(strong_wrong_but_weak_right, 0);
    }
}
