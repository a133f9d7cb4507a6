//! Desk-scale synthetic arithmetic-chain tasks.
//!
//! Each task is a start value followed by `n_steps` add/subtract/multiply
//! links; the answer is the final chain value. Step correctness on these
//! tasks is decidable without any model, which is what makes the synthetic
//! agents and the step oracle exactly checkable against each other.
//!
//! All intermediate values are distinct positive integers (regenerated on
//! collision) and bounded well below the point where the oracle's relative
//! tolerance could blur a fractional corruption offset into a match, so
//! oracle matching stays unambiguous by construction.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exam::DatasetRecord;

/// Chain link operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainOp {
    Add,
    Sub,
    Mul,
}

impl ChainOp {
    pub fn symbol(self) -> char {
        match self {
            ChainOp::Add => '+',
            ChainOp::Sub => '-',
            ChainOp::Mul => '*',
        }
    }

    pub fn apply(self, value: i64, operand: i64) -> i64 {
        match self {
            ChainOp::Add => value + operand,
            ChainOp::Sub => value - operand,
            ChainOp::Mul => value * operand,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainLink {
    pub op: ChainOp,
    pub operand: i64,
}

/// One synthetic arithmetic-chain task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub question_id: String,
    pub n_steps: usize,
    pub start: i64,
    pub chain: Vec<ChainLink>,
    /// Chain values `v0..=vn`; `values[0]` is the start value.
    pub values: Vec<i64>,
    pub question: String,
    pub rationale: String,
    pub answer: String,
}

impl SyntheticTask {
    /// The exact expression text for chain step `index` given the previous
    /// value's decimal rendering.
    pub fn step_expression(&self, index: usize, previous: &str) -> String {
        let link = self.chain[index];
        format!("{previous}{}{}", link.op.symbol(), link.operand)
    }

    pub fn dataset_record(&self) -> DatasetRecord {
        DatasetRecord {
            question_id: self.question_id.clone(),
            question: self.question.clone(),
            rationale: self.rationale.clone(),
            answer: self.answer.clone(),
        }
    }
}

/// Registry mapping question ids to their tasks; shared read-only by the
/// synthetic agent backends.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SyntheticTaskSet {
    tasks: BTreeMap<String, SyntheticTask>,
}

#[derive(Debug, Error)]
pub enum TaskSetError {
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

impl SyntheticTaskSet {
    pub fn from_tasks(tasks: Vec<SyntheticTask>) -> Arc<Self> {
        Arc::new(Self {
            tasks: tasks
                .into_iter()
                .map(|t| (t.question_id.clone(), t))
                .collect(),
        })
    }

    pub fn get(&self, question_id: &str) -> Option<&SyntheticTask> {
        self.tasks.get(question_id)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SyntheticTask> {
        self.tasks.values()
    }

    pub fn save(&self, path: &Path) -> Result<(), TaskSetError> {
        let display = path.display().to_string();
        let mut file = File::create(path).map_err(|source| TaskSetError::Io {
            path: display.clone(),
            source,
        })?;
        for task in self.tasks.values() {
            let line = serde_json::to_string(task).expect("task serializes");
            writeln!(file, "{line}").map_err(|source| TaskSetError::Io {
                path: display.clone(),
                source,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Arc<Self>, TaskSetError> {
        let display = path.display().to_string();
        let file = File::open(path).map_err(|source| TaskSetError::Io {
            path: display.clone(),
            source,
        })?;
        let mut tasks = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| TaskSetError::Io {
                path: display.clone(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let task: SyntheticTask =
                serde_json::from_str(&line).map_err(|source| TaskSetError::Json {
                    path: display.clone(),
                    line: idx + 1,
                    source,
                })?;
            tasks.push(task);
        }
        Ok(Self::from_tasks(tasks))
    }
}

/// Ceiling on `value_range`: keeps `tolerance * |value|` (1e-6 relative)
/// strictly below the 0.5 minimum distance between any integer chain value
/// and a half-offset corruption.
pub const MAX_VALUE_RANGE: i64 = 400_000;

/// Generate `count` tasks of `n_steps` links each, deterministically from
/// the seed. `value_range` bounds every chain value and is clamped into
/// `[20, MAX_VALUE_RANGE]`.
pub fn gen_synthetic_tasks(
    count: usize,
    n_steps: usize,
    value_range: i64,
    seed: u64,
) -> Vec<SyntheticTask> {
    assert!(count >= 1 && n_steps >= 1, "count and n_steps must be >= 1");
    let range = value_range.clamp(20, MAX_VALUE_RANGE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| gen_task(format!("synth-{i:05}"), n_steps, range, &mut rng))
        .collect()
}

fn gen_task(question_id: String, n_steps: usize, range: i64, rng: &mut ChaCha8Rng) -> SyntheticTask {
    loop {
        let start = rng.random_range(2..=9i64);
        let mut values = vec![start];
        let mut chain = Vec::with_capacity(n_steps);
        let mut ok = true;
        for _ in 0..n_steps {
            let v = *values.last().expect("nonempty");
            let mut feasible = Vec::new();
            for op in [ChainOp::Add, ChainOp::Sub, ChainOp::Mul] {
                for operand in 2..=9i64 {
                    let w = op.apply(v, operand);
                    if w >= 1 && w <= range && !values.contains(&w) {
                        feasible.push((op, operand));
                    }
                }
            }
            if feasible.is_empty() {
                ok = false;
                break;
            }
            let (op, operand) = feasible[rng.random_range(0..feasible.len())];
            values.push(op.apply(v, operand));
            chain.push(ChainLink { op, operand });
        }
        if !ok {
            continue;
        }
        return finish_task(question_id, n_steps, start, chain, values);
    }
}

fn finish_task(
    question_id: String,
    n_steps: usize,
    start: i64,
    chain: Vec<ChainLink>,
    values: Vec<i64>,
) -> SyntheticTask {
    let mut question = format!("Start with {start}.");
    let mut rationale = String::new();
    for (i, link) in chain.iter().enumerate() {
        let prev = values[i];
        let next = values[i + 1];
        let (clause, verb) = match link.op {
            ChainOp::Add => (format!(" Add {}.", link.operand), "Adding"),
            ChainOp::Sub => (format!(" Subtract {}.", link.operand), "Subtracting"),
            ChainOp::Mul => (format!(" Multiply by {}.", link.operand), "Multiplying by"),
        };
        question.push_str(&clause);
        rationale.push_str(&format!(
            "{verb} {} gives <<{prev}{}{}={next}>>{next}. ",
            link.operand,
            link.op.symbol(),
            link.operand
        ));
    }
    question.push_str(" What is the final result?");
    let answer = values[n_steps].to_string();
    rationale.push_str(&format!("The final result is {answer}."));
    SyntheticTask {
        question_id,
        n_steps,
        start,
        chain,
        values,
        question,
        rationale,
        answer,
    }
}

/// Dataset records for the generated tasks, in task order.
pub fn dataset_records(tasks: &[SyntheticTask]) -> Vec<DatasetRecord> {
    tasks.iter().map(SyntheticTask::dataset_record).collect()
}
