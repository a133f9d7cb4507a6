//! The tool-action language: `Name(arg, ...)` invocations plus a `Finish`
//! terminator.
//!
//! Parsing is total: any input produces either an [`Action`] or a
//! [`ParseActionError`] with a byte offset, never a panic. `Count` and
//! `Define` split their argument list on top-level commas; every other
//! action treats the full parenthesized content as a single free-text
//! argument, so answers and queries may contain commas.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A parsed tool invocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    /// Evaluate an arithmetic expression.
    Calculator(String),
    /// Store an equation for later solving.
    SetEquation(String),
    /// Solve for a variable among the stored equations, or solve an inline
    /// equation when the argument contains `=`.
    SolveEquation(String),
    /// Bind a variable to the value of an expression.
    Define { var: String, value: String },
    /// Solve a linear inequality in one unknown.
    SolveInequality(String),
    /// Code generation is delegated to an external model and unsupported here.
    Code(String),
    /// Count the items of a comma-separated list.
    Count(Vec<String>),
    /// Look up stored knowledge about an entity.
    KnowledgeQuery(String),
    /// Retrieve the best-matching stored passage for a query.
    ParagraphRetrieval(String),
    /// Answer a query from the offline QA table.
    Qa(String),
    /// Terminate the trajectory with a final answer.
    Finish(String),
}

impl Action {
    /// Surface keyword of the action.
    pub fn name(&self) -> &'static str {
        match self {
            Action::Calculator(_) => "Calculator",
            Action::SetEquation(_) => "SetEquation",
            Action::SolveEquation(_) => "SolveEquation",
            Action::Define { .. } => "Define",
            Action::SolveInequality(_) => "SolveInequality",
            Action::Code(_) => "Code",
            Action::Count(_) => "Count",
            Action::KnowledgeQuery(_) => "KnowledgeQuery",
            Action::ParagraphRetrieval(_) => "ParagraphRetrieval",
            Action::Qa(_) => "QA",
            Action::Finish(_) => "Finish",
        }
    }

    pub fn is_finish(&self) -> bool {
        matches!(self, Action::Finish(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseActionError {
    #[error("unknown action {name:?} at byte {offset}")]
    UnknownAction { name: String, offset: usize },
    #[error("malformed argument list at byte {offset}: {message}")]
    MalformedArguments { offset: usize, message: String },
    #[error("unbalanced parentheses at byte {offset}")]
    UnbalancedParens { offset: usize },
    #[error("expected `Name(...)` at byte {offset}")]
    MissingInvocation { offset: usize },
}

/// Parse the surface form of an action. Leading and trailing whitespace is
/// ignored; anything else outside `Name(...)` is an error.
pub fn parse_action(text: &str) -> Result<Action, ParseActionError> {
    let bytes = text.as_bytes();
    let mut pos = 0;
    while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    let name_start = pos;
    while pos < bytes.len() && (bytes[pos].is_ascii_alphanumeric() || bytes[pos] == b'_') {
        pos += 1;
    }
    if pos == name_start {
        return Err(ParseActionError::MissingInvocation { offset: name_start });
    }
    let name = &text[name_start..pos];
    if pos >= bytes.len() || bytes[pos] != b'(' {
        return Err(ParseActionError::MissingInvocation { offset: pos });
    }
    let open = pos;
    let mut depth = 0usize;
    let mut close = None;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        match b {
            b'(' => depth += 1,
            b')' => {
                depth -= 1;
                if depth == 0 {
                    close = Some(i);
                    break;
                }
            }
            _ => {}
        }
    }
    let close = close.ok_or(ParseActionError::UnbalancedParens { offset: open })?;
    let tail = text[close + 1..].trim();
    if !tail.is_empty() {
        return Err(ParseActionError::MalformedArguments {
            offset: close + 1,
            message: format!("trailing input {tail:?} after closing parenthesis"),
        });
    }
    let content = &text[open + 1..close];
    build_action(name, name_start, content, open + 1)
}

fn build_action(
    name: &str,
    name_offset: usize,
    content: &str,
    content_offset: usize,
) -> Result<Action, ParseActionError> {
    let single = || content.trim().to_string();
    match name {
        "Calculator" => {
            let expr = single();
            if let Some(bad) = expr.bytes().position(|b| {
                !matches!(
                    b,
                    b'0'..=b'9' | b'+' | b'-' | b'*' | b'/' | b'^' | b'(' | b')' | b'.'
                ) && !b.is_ascii_whitespace()
            }) {
                return Err(ParseActionError::MalformedArguments {
                    offset: content_offset + bad,
                    message: format!(
                        "calculator expressions admit only numerals, `+ - * / ^ ( ) .` and whitespace; found {:?}",
                        expr.as_bytes()[bad] as char
                    ),
                });
            }
            Ok(Action::Calculator(expr))
        }
        "SetEquation" => Ok(Action::SetEquation(single())),
        "SolveEquation" => Ok(Action::SolveEquation(single())),
        "Define" => {
            let args = split_top_level(content);
            if args.len() != 2 {
                return Err(ParseActionError::MalformedArguments {
                    offset: content_offset,
                    message: format!("Define takes 2 arguments, found {}", args.len()),
                });
            }
            Ok(Action::Define {
                var: args[0].clone(),
                value: args[1].clone(),
            })
        }
        "SolveInequality" => Ok(Action::SolveInequality(single())),
        "Code" => Ok(Action::Code(single())),
        "Count" => {
            let items = if content.trim().is_empty() {
                Vec::new()
            } else {
                split_top_level(content)
            };
            Ok(Action::Count(items))
        }
        "KnowledgeQuery" => Ok(Action::KnowledgeQuery(single())),
        "ParagraphRetrieval" => Ok(Action::ParagraphRetrieval(single())),
        "QA" => Ok(Action::Qa(single())),
        "Finish" => Ok(Action::Finish(single())),
        other => Err(ParseActionError::UnknownAction {
            name: other.to_string(),
            offset: name_offset,
        }),
    }
}

fn split_top_level(content: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, b) in content.bytes().enumerate() {
        match b {
            b'(' => depth += 1,
            b')' => depth = depth.saturating_sub(1),
            b',' if depth == 0 => {
                out.push(content[start..i].trim().to_string());
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(content[start..].trim().to_string());
    out
}

/// Render an action back to its canonical surface form.
/// `parse_action(render_action(a))` reproduces `a` for any action whose
/// arguments are themselves grammar-valid.
pub fn render_action(action: &Action) -> String {
    match action {
        Action::Calculator(expr) => format!("Calculator({expr})"),
        Action::SetEquation(eq) => format!("SetEquation({eq})"),
        Action::SolveEquation(target) => format!("SolveEquation({target})"),
        Action::Define { var, value } => format!("Define({var}, {value})"),
        Action::SolveInequality(ineq) => format!("SolveInequality({ineq})"),
        Action::Code(desc) => format!("Code({desc})"),
        Action::Count(items) => format!("Count({})", items.join(", ")),
        Action::KnowledgeQuery(entity) => format!("KnowledgeQuery({entity})"),
        Action::ParagraphRetrieval(query) => format!("ParagraphRetrieval({query})"),
        Action::Qa(query) => format!("QA({query})"),
        Action::Finish(answer) => format!("Finish({answer})"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_calculator() {
        assert_eq!(
            parse_action("Calculator(2+3)").unwrap(),
            Action::Calculator("2+3".into())
        );
        assert_eq!(
            parse_action("  Calculator( 2 * (3+4) ) ").unwrap(),
            Action::Calculator("2 * (3+4)".into())
        );
    }

    #[test]
    fn calculator_lexical_rule_enforced() {
        let err = parse_action("Calculator(x+2)").unwrap_err();
        assert!(matches!(err, ParseActionError::MalformedArguments { .. }));
    }

    #[test]
    fn parses_count_items() {
        assert_eq!(
            parse_action("Count(apple, pear, plum)").unwrap(),
            Action::Count(vec!["apple".into(), "pear".into(), "plum".into()])
        );
        assert_eq!(parse_action("Count()").unwrap(), Action::Count(vec![]));
    }

    #[test]
    fn unknown_action_is_an_error() {
        match parse_action("Jump(1)") {
            Err(ParseActionError::UnknownAction { name, offset }) => {
                assert_eq!(name, "Jump");
                assert_eq!(offset, 0);
            }
            other => panic!("expected unknown action, got {other:?}"),
        }
    }

    #[test]
    fn unbalanced_parentheses() {
        assert!(matches!(
            parse_action("Finish(42"),
            Err(ParseActionError::UnbalancedParens { .. })
        ));
        assert!(matches!(
            parse_action("Calculator((1+2)"),
            Err(ParseActionError::UnbalancedParens { .. })
        ));
    }

    #[test]
    fn trailing_garbage_rejected() {
        assert!(matches!(
            parse_action("Finish(42) because"),
            Err(ParseActionError::MalformedArguments { .. })
        ));
    }

    #[test]
    fn free_text_arguments_keep_commas() {
        assert_eq!(
            parse_action("Finish(3, 4 and 5)").unwrap(),
            Action::Finish("3, 4 and 5".into())
        );
        assert_eq!(
            parse_action("QA(who wrote War and Peace, the novel?)").unwrap(),
            Action::Qa("who wrote War and Peace, the novel?".into())
        );
    }

    #[test]
    fn define_takes_exactly_two_arguments() {
        assert_eq!(
            parse_action("Define(x, 3*4)").unwrap(),
            Action::Define {
                var: "x".into(),
                value: "3*4".into()
            }
        );
        assert!(matches!(
            parse_action("Define(x)"),
            Err(ParseActionError::MalformedArguments { .. })
        ));
    }

    #[test]
    fn nested_parens_stay_in_one_argument() {
        assert_eq!(
            parse_action("SolveEquation((x+1)*2=6)").unwrap(),
            Action::SolveEquation("(x+1)*2=6".into())
        );
    }

    #[test]
    fn renders_canonical_forms() {
        assert_eq!(render_action(&Action::Finish("42".into())), "Finish(42)");
        assert_eq!(
            render_action(&Action::Calculator("2*3".into())),
            "Calculator(2*3)"
        );
        assert_eq!(
            render_action(&Action::Count(vec!["a".into(), "b".into()])),
            "Count(a, b)"
        );
        assert_eq!(
            render_action(&Action::Define {
                var: "x".into(),
                value: "1+1".into()
            }),
            "Define(x, 1+1)"
        );
    }

    #[test]
    fn round_trips_hand_picked_actions() {
        let actions = [
            Action::Calculator("2*3".into()),
            Action::SetEquation("x+2=5".into()),
            Action::SolveEquation("x".into()),
            Action::SolveInequality("2*x<6".into()),
            Action::Code("sum a list".into()),
            Action::Count(vec!["a".into(), "b".into(), "c".into()]),
            Action::KnowledgeQuery("Eiffel Tower".into()),
            Action::ParagraphRetrieval("height of the tower".into()),
            Action::Qa("how tall is it?".into()),
            Action::Finish("324 meters".into()),
            Action::Define {
                var: "y".into(),
                value: "2^4".into(),
            },
        ];
        for action in actions {
            assert_eq!(parse_action(&render_action(&action)).unwrap(), action);
        }
    }
}
