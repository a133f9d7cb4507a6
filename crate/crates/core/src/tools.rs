//! Offline execution environment for parsed actions.
//!
//! A [`ToolContext`] holds defined variables, stored equations, and the
//! fixture-backed knowledge and QA stores. Execution is copy-on-update:
//! `execute` never mutates the receiver, it returns the observation text
//! together with the (possibly updated) context, so runs on different
//! trajectories can share a base context freely.
//!
//! Execution is also total: malformed or unsupported inputs produce an
//! `error: ...` observation, never a panic, mirroring the feedback a real
//! tool endpoint would return to the agent.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::expr::{
    eval_expression, eval_with_vars, parse_expr, render_decimal, Expr, ExprError, Rational,
};

/// Execution environment shared by the math and QA tool families.
#[derive(Debug, Clone, Default)]
pub struct ToolContext {
    /// Variable bindings, unique by name.
    pub defined_vars: BTreeMap<String, Rational>,
    /// Stored equations, oldest first.
    pub equations: Vec<String>,
    /// Knowledge passages keyed by lowercased entity.
    pub knowledge_store: BTreeMap<String, KnowledgeEntry>,
    /// Answers keyed by normalized query.
    pub qa_table: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub entity: String,
    pub passages: Vec<String>,
}

#[derive(Debug, Error)]
pub enum ToolFixtureError {
    #[error("failed to read {path}: {source}")]
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

#[derive(Debug, Deserialize)]
struct QaRecord {
    query: String,
    answer: String,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, ToolFixtureError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| ToolFixtureError::Io {
        path: display.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| ToolFixtureError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| ToolFixtureError::Json {
            path: display.clone(),
            line: idx + 1,
            source,
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Lowercase, replace punctuation with spaces, and collapse whitespace.
/// Shared by QA lookup, the default equivalence judge, and answer grading.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last_space = true;
    for c in text.chars() {
        if c.is_alphanumeric() {
            out.extend(c.to_lowercase());
            last_space = false;
        } else if !last_space {
            out.push(' ');
            last_space = true;
        }
    }
    out.trim_end().to_string()
}

fn tokens(text: &str) -> Vec<String> {
    normalize_text(text)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

impl ToolContext {
    pub fn new() -> Self {
        Self::default()
    }

    /// Load knowledge and QA fixtures from the configured JSONL paths.
    pub fn load(
        knowledge_path: Option<&Path>,
        qa_path: Option<&Path>,
    ) -> Result<Self, ToolFixtureError> {
        let mut ctx = Self::new();
        if let Some(path) = knowledge_path {
            for entry in read_jsonl::<KnowledgeEntry>(path)? {
                ctx.knowledge_store
                    .insert(entry.entity.to_lowercase(), entry);
            }
        }
        if let Some(path) = qa_path {
            for record in read_jsonl::<QaRecord>(path)? {
                ctx.qa_table
                    .insert(normalize_text(&record.query), record.answer);
            }
        }
        Ok(ctx)
    }

    /// Execute one action, returning the observation and the context to use
    /// for subsequent steps.
    pub fn execute(&self, action: &Action) -> (String, ToolContext) {
        match action {
            Action::Calculator(expr_text) => {
                let obs = match eval_expression(expr_text) {
                    Ok(value) => render_decimal(&value),
                    Err(e) => format!("error: {e}"),
                };
                (obs, self.clone())
            }
            Action::SetEquation(equation) => {
                let eq = equation.trim();
                if !eq.contains('=') {
                    return (
                        "error: SetEquation expects an equation containing `=`".into(),
                        self.clone(),
                    );
                }
                let mut next = self.clone();
                next.equations.push(eq.to_string());
                (eq.to_string(), next)
            }
            Action::Define { var, value } => self.define(var, value),
            Action::SolveEquation(arg) => self.solve_equation(arg),
            Action::SolveInequality(ineq) => (self.solve_inequality(ineq), self.clone()),
            Action::Count(items) => (items.len().to_string(), self.clone()),
            Action::KnowledgeQuery(entity) => (self.knowledge_query(entity), self.clone()),
            Action::ParagraphRetrieval(query) => (self.paragraph_retrieval(query), self.clone()),
            Action::Qa(query) => {
                let obs = self
                    .qa_table
                    .get(&normalize_text(query))
                    .cloned()
                    .unwrap_or_else(|| "unknown".into());
                (obs, self.clone())
            }
            Action::Finish(answer) => (answer.clone(), self.clone()),
            Action::Code(_) => ("unsupported action: Code".into(), self.clone()),
        }
    }

    fn define(&self, var: &str, value: &str) -> (String, ToolContext) {
        if !is_identifier(var) {
            return (
                format!("error: invalid variable name {var:?}"),
                self.clone(),
            );
        }
        let expr = match parse_expr(value) {
            Ok(e) => e,
            Err(e) => return (format!("error: {e}"), self.clone()),
        };
        match eval_with_vars(&expr, &self.defined_vars) {
            Ok(v) => {
                let mut next = self.clone();
                let obs = format!("{var} = {}", render_decimal(&v));
                next.defined_vars.insert(var.to_string(), v);
                (obs, next)
            }
            Err(e) => (format!("error: {e}"), self.clone()),
        }
    }

    fn solve_equation(&self, arg: &str) -> (String, ToolContext) {
        let arg = arg.trim();
        let result = if arg.contains('=') {
            solve_linear_equation(arg, None, &self.defined_vars)
        } else if is_identifier(arg) {
            self.solve_stored(arg)
        } else {
            Err(SolveError::Other(format!(
                "expected a variable name or an inline equation, found {arg:?}"
            )))
        };
        match result {
            Ok((var, value)) => {
                let obs = format!("{var} = {}", render_decimal(&value));
                let mut next = self.clone();
                next.defined_vars.insert(var, value);
                (obs, next)
            }
            Err(e) => (format!("error: {e}"), self.clone()),
        }
    }

    fn solve_stored(&self, target: &str) -> Result<(String, Rational), SolveError> {
        let mut saw_multi = false;
        // Newest equation mentioning exactly the target wins.
        for eq in self.equations.iter().rev() {
            match equation_unknowns(eq, &self.defined_vars) {
                Ok(unknowns) if unknowns.iter().any(|u| u == target) => {
                    if unknowns.len() == 1 {
                        return solve_linear_equation(eq, Some(target), &self.defined_vars);
                    }
                    saw_multi = true;
                }
                _ => {}
            }
        }
        if saw_multi {
            Err(SolveError::MultipleUnknowns)
        } else {
            Err(SolveError::Other(format!(
                "no stored equation involves {target}"
            )))
        }
    }

    fn knowledge_query(&self, entity: &str) -> String {
        match self.knowledge_store.get(&entity.trim().to_lowercase()) {
            Some(entry) if !entry.passages.is_empty() => entry.passages.join(" "),
            _ => "no knowledge found".into(),
        }
    }

    fn paragraph_retrieval(&self, query: &str) -> String {
        let query_tokens = tokens(query);
        if query_tokens.is_empty() {
            return "no knowledge found".into();
        }
        let mut best: Option<(f64, &str)> = None;
        for entry in self.knowledge_store.values() {
            for passage in &entry.passages {
                let passage_tokens = tokens(passage);
                let overlap = query_tokens
                    .iter()
                    .filter(|t| passage_tokens.contains(t))
                    .count();
                let union = {
                    let mut all: Vec<&String> =
                        query_tokens.iter().chain(passage_tokens.iter()).collect();
                    all.sort();
                    all.dedup();
                    all.len()
                };
                if union == 0 {
                    continue;
                }
                let score = overlap as f64 / union as f64;
                if score > 0.0 && best.map(|(s, _)| score > s).unwrap_or(true) {
                    best = Some((score, passage));
                }
            }
        }
        match best {
            Some((_, passage)) => passage.to_string(),
            None => "no knowledge found".into(),
        }
    }

    fn solve_inequality(&self, ineq: &str) -> String {
        match solve_linear_inequality(ineq, &self.defined_vars) {
            Ok(obs) => obs,
            Err(e) => format!("error: {e}"),
        }
    }
}

fn is_identifier(s: &str) -> bool {
    let mut bytes = s.bytes();
    match bytes.next() {
        Some(b) if b.is_ascii_alphabetic() || b == b'_' => {}
        _ => return false,
    }
    bytes.all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

#[derive(Debug, Error, PartialEq, Eq)]
enum SolveError {
    #[error("equation is not linear in one unknown")]
    Nonlinear,
    #[error("equation has multiple unknowns")]
    MultipleUnknowns,
    #[error("no unknown to solve for")]
    NoUnknown,
    #[error("no unique solution")]
    NoUniqueSolution,
    #[error("{0}")]
    Expr(String),
    #[error("{0}")]
    Other(String),
}

impl From<ExprError> for SolveError {
    fn from(e: ExprError) -> Self {
        SolveError::Expr(e.to_string())
    }
}

/// Linear form `coeff * unknown + constant`.
struct Linear {
    coeff: Rational,
    constant: Rational,
}

fn collect_vars(expr: &Expr, out: &mut Vec<String>) {
    match expr {
        Expr::Number(_) => {}
        Expr::Variable(name) => {
            if !out.contains(name) {
                out.push(name.clone());
            }
        }
        Expr::Negate(inner) => collect_vars(inner, out),
        Expr::Binary { lhs, rhs, .. } => {
            collect_vars(lhs, out);
            collect_vars(rhs, out);
        }
    }
}

fn equation_unknowns(
    equation: &str,
    vars: &BTreeMap<String, Rational>,
) -> Result<Vec<String>, SolveError> {
    let (lhs, rhs) = equation
        .split_once('=')
        .ok_or_else(|| SolveError::Other("expected an equation containing `=`".into()))?;
    let mut names = Vec::new();
    collect_vars(&parse_expr(lhs)?, &mut names);
    collect_vars(&parse_expr(rhs)?, &mut names);
    names.retain(|n| !vars.contains_key(n));
    Ok(names)
}

fn eval_linear(
    expr: &Expr,
    unknown: &str,
    vars: &BTreeMap<String, Rational>,
) -> Result<Linear, SolveError> {
    use crate::expr::BinOp;
    use num_traits::Zero;
    match expr {
        Expr::Number(v) => Ok(Linear {
            coeff: Rational::zero(),
            constant: v.clone(),
        }),
        Expr::Variable(name) => {
            if name == unknown {
                Ok(Linear {
                    coeff: Rational::new(1.into(), 1.into()),
                    constant: Rational::zero(),
                })
            } else if let Some(v) = vars.get(name) {
                Ok(Linear {
                    coeff: Rational::zero(),
                    constant: v.clone(),
                })
            } else {
                Err(SolveError::Expr(
                    ExprError::UndefinedVariable(name.clone()).to_string(),
                ))
            }
        }
        Expr::Negate(inner) => {
            let l = eval_linear(inner, unknown, vars)?;
            Ok(Linear {
                coeff: -l.coeff,
                constant: -l.constant,
            })
        }
        Expr::Binary { op, lhs, rhs } => {
            let l = eval_linear(lhs, unknown, vars)?;
            let r = eval_linear(rhs, unknown, vars)?;
            match op {
                BinOp::Add => Ok(Linear {
                    coeff: l.coeff + r.coeff,
                    constant: l.constant + r.constant,
                }),
                BinOp::Sub => Ok(Linear {
                    coeff: l.coeff - r.coeff,
                    constant: l.constant - r.constant,
                }),
                BinOp::Mul => {
                    use num_traits::Zero as _;
                    if !l.coeff.is_zero() && !r.coeff.is_zero() {
                        return Err(SolveError::Nonlinear);
                    }
                    Ok(Linear {
                        coeff: &l.coeff * &r.constant + &r.coeff * &l.constant,
                        constant: l.constant * r.constant,
                    })
                }
                BinOp::Div => {
                    use num_traits::Zero as _;
                    if !r.coeff.is_zero() {
                        return Err(SolveError::Nonlinear);
                    }
                    if r.constant.is_zero() {
                        return Err(SolveError::Expr(ExprError::DivisionByZero.to_string()));
                    }
                    Ok(Linear {
                        coeff: l.coeff / &r.constant,
                        constant: l.constant / r.constant,
                    })
                }
                BinOp::Pow => {
                    use num_traits::Zero as _;
                    if !l.coeff.is_zero() || !r.coeff.is_zero() {
                        return Err(SolveError::Nonlinear);
                    }
                    // Constant base and exponent: reuse full evaluation.
                    let value = eval_with_vars(expr, vars).map_err(SolveError::from)?;
                    Ok(Linear {
                        coeff: Rational::zero(),
                        constant: value,
                    })
                }
            }
        }
    }
}

fn solve_linear_equation(
    equation: &str,
    target: Option<&str>,
    vars: &BTreeMap<String, Rational>,
) -> Result<(String, Rational), SolveError> {
    use num_traits::Zero;
    let unknowns = equation_unknowns(equation, vars)?;
    let unknown = match target {
        Some(t) => {
            if !unknowns.iter().any(|u| u == t) {
                return Err(SolveError::Other(format!(
                    "equation does not involve {t}"
                )));
            }
            if unknowns.len() > 1 {
                return Err(SolveError::MultipleUnknowns);
            }
            t.to_string()
        }
        None => match unknowns.len() {
            0 => return Err(SolveError::NoUnknown),
            1 => unknowns[0].clone(),
            _ => return Err(SolveError::MultipleUnknowns),
        },
    };
    let (lhs_text, rhs_text) = equation.split_once('=').expect("checked above");
    let lhs = eval_linear(&parse_expr(lhs_text)?, &unknown, vars)?;
    let rhs = eval_linear(&parse_expr(rhs_text)?, &unknown, vars)?;
    let coeff = lhs.coeff - rhs.coeff;
    let constant = rhs.constant - lhs.constant;
    if coeff.is_zero() {
        return Err(SolveError::NoUniqueSolution);
    }
    Ok((unknown, constant / coeff))
}

fn solve_linear_inequality(
    ineq: &str,
    vars: &BTreeMap<String, Rational>,
) -> Result<String, SolveError> {
    use num_traits::Zero;
    let (op_start, op) = find_inequality_op(ineq)
        .ok_or_else(|| SolveError::Other("expected one of `< <= > >=`".into()))?;
    let lhs_text = &ineq[..op_start];
    let rhs_text = &ineq[op_start + op.len()..];

    let mut names = Vec::new();
    collect_vars(&parse_expr(lhs_text)?, &mut names);
    collect_vars(&parse_expr(rhs_text)?, &mut names);
    names.retain(|n| !vars.contains_key(n));
    if names.len() > 1 {
        return Err(SolveError::MultipleUnknowns);
    }
    let unknown = names.first().cloned().unwrap_or_default();

    let lhs = eval_linear(&parse_expr(lhs_text)?, &unknown, vars)?;
    let rhs = eval_linear(&parse_expr(rhs_text)?, &unknown, vars)?;
    let coeff = lhs.coeff - rhs.coeff;
    let constant = rhs.constant - lhs.constant;
    if coeff.is_zero() {
        // Constant truth: 0 OP constant.
        let zero = Rational::zero();
        let holds = match op {
            "<" => zero < constant,
            "<=" => zero <= constant,
            ">" => zero > constant,
            ">=" => zero >= constant,
            _ => unreachable!(),
        };
        return Ok(holds.to_string());
    }
    let bound = constant / &coeff;
    let flipped = coeff < Rational::zero();
    let final_op = if flipped { flip_op(op) } else { op };
    Ok(format!("{unknown} {final_op} {}", render_decimal(&bound)))
}

fn find_inequality_op(text: &str) -> Option<(usize, &'static str)> {
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    for i in 0..bytes.len() {
        match bytes[i] {
            b'(' => depth += 1,
            b')' => depth = depth.saturating_sub(1),
            b'<' | b'>' if depth == 0 => {
                let two = bytes.get(i + 1) == Some(&b'=');
                return Some(match (bytes[i], two) {
                    (b'<', true) => (i, "<="),
                    (b'<', false) => (i, "<"),
                    (b'>', true) => (i, ">="),
                    (b'>', false) => (i, ">"),
                    _ => unreachable!(),
                });
            }
            _ => {}
        }
    }
    None
}

fn flip_op(op: &str) -> &'static str {
    match op {
        "<" => ">",
        "<=" => ">=",
        ">" => "<",
        ">=" => "<=",
        _ => unreachable!(),
    }
}
