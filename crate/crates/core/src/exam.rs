//! The data-producing pipeline: compile gold rationales into trajectories,
//! run the collaborative examination, and export loss-masked training sets.
//!
//! The deterministic rationale compiler turns inline arithmetic annotations
//! (`<<2*3=6>>`) into Calculator steps whose observations come from the
//! executor, never from the annotation's claimed value; mismatches are
//! flagged. An agent-backed annotator can replace the compiler for datasets
//! without annotations, with its output validated by the action parser.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{parse_action, render_action, Action};
use crate::expr::{eval_expression, parse_decimal, render_decimal};
use crate::trajectory::{
    serialize_trajectory,
    segment_for_training, write_training_examples, Author, Outcome, Step, Trajectory,
};

/// One training-dataset record: question, gold rationale, gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub question_id: String,
    pub question: String,
    pub rationale: String,
    pub answer: String,
}

#[derive(Debug, Error)]
pub enum ExamError {
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
    #[error("dataset record {0} has an empty answer")]
    EmptyAnswer(String),
    #[error("invalid examination config: {0}")]
    InvalidConfig(String),
    #[error("annotator produced no usable steps: {0}")]
    AnnotatorFailed(String),
    #[error(transparent)]
    Trajectory(#[from] crate::trajectory::TrajectoryError),
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>, ExamError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| ExamError::Io {
        path: display.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| ExamError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord =
            serde_json::from_str(&line).map_err(|source| ExamError::Json {
                path: display.clone(),
                line: idx + 1,
                source,
            })?;
        if record.answer.is_empty() {
            return Err(ExamError::EmptyAnswer(record.question_id));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<(), ExamError> {
    let display = path.display().to_string();
    let mut file = File::create(path).map_err(|source| ExamError::Io {
        path: display.clone(),
        source,
    })?;
    for record in records {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(file, "{line}").map_err(|source| ExamError::Io {
            path: display.clone(),
            source,
        })?;
    }
    Ok(())
}

/// Quality flags raised while compiling a rationale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompileFlag {
    /// No usable arithmetic annotations; the trajectory is Finish-only.
    NoAnnotations,
    /// The annotation's claimed value disagrees with the executed result.
    AnnotationMismatch { step_index: usize },
    /// The annotation's expression failed to evaluate and was skipped.
    InvalidAnnotation { step_index: usize, message: String },
}

/// A compiled gold trajectory plus any quality flags.
#[derive(Debug, Clone)]
pub struct CompiledGold {
    pub trajectory: Trajectory,
    pub flags: Vec<CompileFlag>,
}

impl CompiledGold {
    pub fn is_flagged(&self) -> bool {
        !self.flags.is_empty()
    }
}

fn annotation_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<<([^=>]+)=([^>]*)>>").expect("valid regex"))
}

/// Split text into sentences at `. ! ?` or newlines, keeping the
/// terminator. A period followed by a digit is a decimal point, not a
/// sentence boundary.
fn split_sentences(text: &str) -> Vec<String> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut start = 0usize;
    for i in 0..bytes.len() {
        let b = bytes[i];
        let boundary = match b {
            b'\n' => true,
            b'.' | b'!' | b'?' => bytes
                .get(i + 1)
                .map(|next| next.is_ascii_whitespace())
                .unwrap_or(true),
            _ => false,
        };
        if boundary {
            let sentence = text[start..=i].trim();
            if !sentence.is_empty() {
                out.push(sentence.to_string());
            }
            start = i + 1;
        }
    }
    let rest = text[start..].trim();
    if !rest.is_empty() {
        out.push(rest.to_string());
    }
    out
}

fn collapse_spaces(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last_space = false;
    for c in text.chars() {
        if c == ' ' {
            if !last_space {
                out.push(c);
            }
            last_space = true;
        } else {
            out.push(c);
            last_space = false;
        }
    }
    out.trim().to_string()
}

/// Deterministically compile a gold rationale into a trajectory. Every
/// sentence carrying an inline arithmetic annotation becomes one Calculator
/// step; unannotated sentences merge into the following step's thought; a
/// terminal `Finish(answer)` step is always appended.
pub fn compile_rationale(record: &DatasetRecord) -> CompiledGold {
    let mut flags = Vec::new();
    let mut trajectory = Trajectory::new(record.question_id.clone(), record.question.clone());
    let mut pending = String::new();

    for sentence in split_sentences(&record.rationale) {
        let stripped = collapse_spaces(&annotation_regex().replace_all(&sentence, ""));
        let first_annotation = annotation_regex()
            .captures(&sentence)
            .map(|c| (c[1].trim().to_string(), c[2].trim().to_string()));
        let Some((expr, claimed)) = first_annotation else {
            if !stripped.is_empty() {
                if !pending.is_empty() {
                    pending.push(' ');
                }
                pending.push_str(&stripped);
            }
            continue;
        };

        let index = trajectory.next_index();
        let value = match eval_expression(&expr) {
            Ok(v) => v,
            Err(e) => {
                flags.push(CompileFlag::InvalidAnnotation {
                    step_index: index,
                    message: e.to_string(),
                });
                // Unusable annotation: treat the sentence as plain text.
                if !stripped.is_empty() {
                    if !pending.is_empty() {
                        pending.push(' ');
                    }
                    pending.push_str(&stripped);
                }
                continue;
            }
        };
        let observation = render_decimal(&value);
        match parse_decimal(&claimed) {
            Some(c) if c == value => {}
            _ => flags.push(CompileFlag::AnnotationMismatch { step_index: index }),
        }
        let thought = if pending.is_empty() {
            stripped
        } else {
            let merged = format!("{pending} {stripped}");
            pending = String::new();
            collapse_spaces(&merged)
        };
        let action = Action::Calculator(expr);
        trajectory.steps.push(Step::new(
            index,
            Author::Gold,
            thought,
            render_action(&action),
            observation,
        ));
    }

    if trajectory.steps.is_empty() {
        flags.push(CompileFlag::NoAnnotations);
    }
    let finish_index = trajectory.next_index();
    let finish = Action::Finish(record.answer.clone());
    trajectory.steps.push(Step::new(
        finish_index,
        Author::Gold,
        pending,
        render_action(&finish),
        record.answer.clone(),
    ));
    trajectory.final_answer = Some(record.answer.clone());
    trajectory.outcome = Outcome::Correct;
    CompiledGold { trajectory, flags }
}

/// Compile a record through an agent-backed annotator instead of the
/// deterministic compiler. The annotator sees the question together with
/// the reference reasoning and produces steps one at a time; every action
/// is validated by the parser and executed for its observation. The
/// terminal step is always `Finish(answer)` with the dataset's gold
/// answer, so the compiled trajectory stays answer-correct by
/// construction.
pub fn compile_with_annotator(
    record: &DatasetRecord,
    annotator: &mut dyn crate::agent::Agent,
    max_steps: u32,
) -> Result<CompiledGold, ExamError> {
    // The prompt trajectory embeds the reference reasoning; the compiled
    // output keeps the plain question.
    let mut prompt = Trajectory::new(
        record.question_id.clone(),
        format!("{}\nReference reasoning: {}", record.question, record.rationale),
    );
    let mut output = Trajectory::new(record.question_id.clone(), record.question.clone());
    let mut ctx = crate::tools::ToolContext::new();
    let sampling = annotator.profile().sampling.clone();

    for _ in 0..max_steps {
        let context = serialize_trajectory(&prompt, false);
        let prev_observation = prompt.last_non_erased().map(|s| s.observation.clone());
        let request = crate::agent::StepRequest {
            question_id: &record.question_id,
            question: &record.question,
            context: &context,
            next_index: prompt.next_index(),
            prev_observation: prev_observation.as_deref(),
            sampling: &sampling,
        };
        let proposal = annotator
            .generate_step(&request)
            .map_err(|e| ExamError::AnnotatorFailed(e.to_string()))?;
        let action = parse_action(&proposal.action_text)
            .map_err(|e| ExamError::AnnotatorFailed(format!("{e} in {:?}", proposal.action_text)))?;
        let index = prompt.next_index();
        if action.is_finish() {
            let finish = Action::Finish(record.answer.clone());
            for trajectory in [&mut prompt, &mut output] {
                trajectory.steps.push(Step::new(
                    index,
                    Author::Gold,
                    proposal.thought.clone(),
                    render_action(&finish),
                    record.answer.clone(),
                ));
                trajectory.final_answer = Some(record.answer.clone());
                trajectory.outcome = Outcome::Correct;
            }
            return Ok(CompiledGold {
                trajectory: output,
                flags: Vec::new(),
            });
        }
        let (observation, next_ctx) = ctx.execute(&action);
        ctx = next_ctx;
        for trajectory in [&mut prompt, &mut output] {
            trajectory.steps.push(Step::new(
                index,
                Author::Gold,
                proposal.thought.clone(),
                proposal.action_text.clone(),
                observation.clone(),
            ));
        }
    }
    Err(ExamError::AnnotatorFailed(format!(
        "no Finish action within {max_steps} steps"
    )))
}

/// Write the two training files: `self_practicing.jsonl` from gold
/// trajectories and `reflective.jsonl` from revised trajectories. Output is
/// byte-stable across runs for identical inputs.
pub fn emit_training_sets(
    gold: &[Trajectory],
    revised: &[Trajectory],
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf), ExamError> {
    std::fs::create_dir_all(out_dir).map_err(|source| ExamError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let self_practicing = out_dir.join("self_practicing.jsonl");
    let reflective = out_dir.join("reflective.jsonl");
    let gold_examples: Vec<_> = gold.iter().map(segment_for_training).collect();
    let revised_examples: Vec<_> = revised.iter().map(segment_for_training).collect();
    write_training_examples(&self_practicing, &gold_examples)?;
    write_training_examples(&reflective, &revised_examples)?;
    Ok((self_practicing, reflective))
}


// --- Collaborative examination ---

use crate::agent::{spawn_agent, AgentEnv, AgentProfile};
use crate::metrics::{grade_answer, CostReport, TaskKind};
use crate::oracle::{check_step, EquivalenceJudge, ReferenceSet};
use crate::orchestrator::{kept_malformed_step, produce_step};
use crate::tools::ToolContext;
use crate::trajectory::{erase_step, OracleLabel};

/// Examination settings. Up to four trajectories are sampled per question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamConfig {
    pub samples_per_question: u32,
    /// Decoding parameters applied to the local agent's sampling.
    pub sampling: crate::agent::SamplingParams,
    pub mode: TaskKind,
    pub max_steps: u32,
    /// Malformed-generation retry budget per step index.
    pub max_retries: u32,
}

impl Default for ExamConfig {
    fn default() -> Self {
        Self {
            samples_per_question: 4,
            sampling: crate::agent::SamplingParams::default(),
            mode: TaskKind::Math,
            max_steps: 15,
            max_retries: 2,
        }
    }
}

impl ExamConfig {
    pub fn validate(&self) -> Result<(), ExamError> {
        if !(1..=4).contains(&self.samples_per_question) {
            return Err(ExamError::InvalidConfig(format!(
                "samples_per_question must lie in 1..=4, got {}",
                self.samples_per_question
            )));
        }
        Ok(())
    }
}

/// Oracle label given to one local step during a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub index: usize,
    pub label: OracleLabel,
    pub erased: bool,
}

/// One sampled trajectory and what happened to it.
#[derive(Debug, Clone)]
pub struct ExamSample {
    pub sample_index: u32,
    /// Revised trajectory; `None` when a backend failure discarded the
    /// sample.
    pub trajectory: Option<Trajectory>,
    pub retained: bool,
    pub corrections: u32,
    pub labels: Vec<LabelEntry>,
    pub discard_reason: Option<String>,
}

/// Everything the examination produced for one question.
#[derive(Debug, Clone)]
pub struct ExamOutcome {
    pub question_id: String,
    pub gold: Trajectory,
    pub gold_flags: Vec<CompileFlag>,
    pub samples: Vec<ExamSample>,
}

impl ExamOutcome {
    /// Revised trajectories that earned a place in the training set.
    pub fn retained_trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.samples
            .iter()
            .filter(|s| s.retained)
            .filter_map(|s| s.trajectory.as_ref())
    }
}

/// Run the collaborative examination for one record: sample local
/// trajectories, label every local step with the rule-based oracle, erase
/// wrong steps and let the cloud regenerate them, and retain samples whose
/// final answer matches gold. Retained samples enlarge the reference set
/// for this question's later samples.
#[allow(clippy::too_many_arguments)]
pub fn run_examination(
    record: &DatasetRecord,
    local: &AgentProfile,
    cloud: &AgentProfile,
    exam: &ExamConfig,
    env: &AgentEnv,
    base_tools: &ToolContext,
    judge: Option<&dyn EquivalenceJudge>,
    run_seed: u64,
) -> Result<ExamOutcome, ExamError> {
    exam.validate()?;
    let compiled = compile_rationale(record);
    let mut reference = ReferenceSet::new(exam.mode);
    reference.extend_with(&compiled.trajectory);

    let mut samples = Vec::new();
    for sample_index in 0..exam.samples_per_question {
        let sample_seed = crate::stable_hash(&[
            "exam".into(),
            run_seed.into(),
            u64::from(sample_index).into(),
        ]);
        let sample = run_exam_sample(
            record,
            local,
            cloud,
            exam,
            env,
            base_tools,
            judge,
            &reference,
            sample_index,
            sample_seed,
        );
        if sample.retained {
            if let Some(traj) = &sample.trajectory {
                reference.extend_with(traj);
            }
        }
        samples.push(sample);
    }
    Ok(ExamOutcome {
        question_id: record.question_id.clone(),
        gold: compiled.trajectory,
        gold_flags: compiled.flags,
        samples,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_exam_sample(
    record: &DatasetRecord,
    local_profile: &AgentProfile,
    cloud_profile: &AgentProfile,
    exam: &ExamConfig,
    env: &AgentEnv,
    base_tools: &ToolContext,
    judge: Option<&dyn EquivalenceJudge>,
    reference: &ReferenceSet,
    sample_index: u32,
    sample_seed: u64,
) -> ExamSample {
    let discard = |reason: String| ExamSample {
        sample_index,
        trajectory: None,
        retained: false,
        corrections: 0,
        labels: Vec::new(),
        discard_reason: Some(reason),
    };
    let mut local_profile = local_profile.clone();
    local_profile.sampling = exam.sampling.clone();
    let mut local = match spawn_agent(&local_profile, env, &record.question_id, sample_seed) {
        Ok(agent) => agent,
        Err(e) => return discard(e.to_string()),
    };
    let mut cloud = match spawn_agent(cloud_profile, env, &record.question_id, sample_seed) {
        Ok(agent) => agent,
        Err(e) => return discard(e.to_string()),
    };

    let mut trajectory = Trajectory::new(record.question_id.clone(), record.question.clone());
    let mut tools = base_tools.clone();
    let mut cost = CostReport::default(); // examination cost is not reported
    let mut labels = Vec::new();
    let mut corrections = 0u32;
    let mut final_answer: Option<String> = None;
    let mut budget_index = usize::MAX;
    let mut retries_used = 0u32;

    while trajectory.non_erased_len() < exam.max_steps as usize && final_answer.is_none() {
        let index = trajectory.next_index();
        if index != budget_index {
            budget_index = index;
            retries_used = 0;
        }
        // Local step, with the malformed retry budget.
        let executed = loop {
            match produce_step(
                local.as_mut(),
                Author::Local,
                &trajectory,
                &tools,
                record,
                &mut cost,
                env,
            ) {
                Ok(Ok(executed)) => break executed,
                Ok(Err(reason)) => {
                    if retries_used < exam.max_retries {
                        retries_used += 1;
                        continue;
                    }
                    let mut kept = kept_malformed_step(index, Author::Local, &reason);
                    kept.tools = tools.clone();
                    break kept;
                }
                Err(backend_error) => return discard(backend_error.to_string()),
            }
        };
        let tools_before = tools.clone();
        tools = executed.tools;
        let mut step = executed.step;
        let label = check_step(&step, reference, judge);
        step.oracle_label = Some(label);
        labels.push(LabelEntry {
            index,
            label,
            erased: label == OracleLabel::Wrong,
        });
        let local_finish = executed.finish_answer;
        trajectory.steps.push(step);

        if label == OracleLabel::Wrong {
            // Erase and let the cloud regenerate this one step, accepted
            // without further checking.
            trajectory = match erase_step(&trajectory, index) {
                Ok(t) => t,
                Err(e) => return discard(e.to_string()),
            };
            tools = tools_before;
            corrections += 1;
            match produce_step(
                cloud.as_mut(),
                Author::Cloud,
                &trajectory,
                &tools,
                record,
                &mut cost,
                env,
            ) {
                Ok(Ok(executed)) => {
                    tools = executed.tools;
                    final_answer = executed.finish_answer;
                    trajectory.steps.push(executed.step);
                }
                Ok(Err(reason)) => {
                    let mut kept = kept_malformed_step(index, Author::Cloud, &reason);
                    kept.tools = tools.clone();
                    trajectory.steps.push(kept.step);
                }
                Err(backend_error) => return discard(backend_error.to_string()),
            }
        } else {
            final_answer = local_finish;
        }
    }

    if let Some(answer) = &final_answer {
        trajectory.final_answer = Some(answer.clone());
        trajectory.outcome = if grade_answer(answer, &record.answer, exam.mode) {
            Outcome::Correct
        } else {
            Outcome::Wrong
        };
    }
    let retained = trajectory.outcome == Outcome::Correct;
    let discard_reason = if retained {
        None
    } else if final_answer.is_none() {
        Some("no final answer within the step budget".to_string())
    } else {
        Some("final answer does not match gold".to_string())
    };
    ExamSample {
        sample_index,
        trajectory: Some(trajectory),
        retained,
        corrections,
        labels,
        discard_reason,
    }
}

/// Examination report row, one per (question, sample).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamReportRow {
    pub question_id: String,
    pub sample: u32,
    pub retained: bool,
    pub corrections: u32,
    pub labels: Vec<LabelEntry>,
}

pub fn exam_report_rows(outcome: &ExamOutcome) -> Vec<ExamReportRow> {
    outcome
        .samples
        .iter()
        .map(|s| ExamReportRow {
            question_id: outcome.question_id.clone(),
            sample: s.sample_index,
            retained: s.retained,
            corrections: s.corrections,
            labels: s.labels.clone(),
        })
        .collect()
}

pub fn write_exam_report(path: &Path, rows: &[ExamReportRow]) -> Result<(), ExamError> {
    let display = path.display().to_string();
    let mut file = File::create(path).map_err(|source| ExamError::Io {
        path: display.clone(),
        source,
    })?;
    for row in rows {
        let line = serde_json::to_string(row).expect("row serializes");
        writeln!(file, "{line}").map_err(|source| ExamError::Io {
            path: display.clone(),
            source,
        })?;
    }
    Ok(())
}


/// Examine many records with bounded parallelism. Questions run
/// independently and in parallel; samples within one question stay
/// sequential because the reference set grows across them. Output order
/// follows the dataset.
#[allow(clippy::too_many_arguments)]
pub fn run_examination_batch(
    records: &[DatasetRecord],
    local: &AgentProfile,
    cloud: &AgentProfile,
    exam: &ExamConfig,
    env: &AgentEnv,
    base_tools: &ToolContext,
    judge: Option<&dyn EquivalenceJudge>,
    global_seed: u64,
    parallelism: usize,
) -> Result<Vec<ExamOutcome>, ExamError> {
    exam.validate()?;
    let run_one = |record: &DatasetRecord| {
        let seed = crate::orchestrator::record_seed(global_seed, &record.question_id);
        run_examination(record, local, cloud, exam, env, base_tools, judge, seed)
            .expect("config validated above")
    };
    if parallelism > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .expect("thread pool");
        Ok(pool.install(|| {
            use rayon::prelude::*;
            records.par_iter().map(run_one).collect()
        }))
    } else {
        Ok(records.iter().map(run_one).collect())
    }
}
