//! Step-level collaborative inference between a small local agent and a
//! large cloud agent.
//!
//! The crate is organized around an interaction trajectory: a question
//! followed by thought/action/observation steps produced by an agent and a
//! tool executor. On top of that sit the escalation policies that decide
//! when a step should be regenerated by the cloud agent, the rule-based
//! step oracle used to build training data, the examination pipeline that
//! produces loss-masked training sets, and a cost/accuracy benchmark
//! harness with synthetic, scripted, and remote agent backends.

pub mod action;
pub mod agent;
pub mod config;
pub mod exam;
pub mod expr;
pub mod synth;
pub mod metrics;
pub mod oracle;
pub mod orchestrator;
pub mod policy;
pub mod report;
pub mod tools;
pub mod trajectory;

mod hashing;

pub use hashing::{hash01, stable_hash};
