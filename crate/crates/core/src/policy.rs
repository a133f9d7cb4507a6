//! Escalation policies: the rule evaluated after each local step that
//! decides whether the cloud agent regenerates it.
//!
//! The adaptive variant escalates when the local agent's wrongness estimate
//! reaches the activation threshold `p`; escalation uses `>=` so that
//! `p = 0` behaves like `Always` and any `p` above 1 behaves like `Never`.
//! Lowering the threshold can only add escalations, never remove them.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How token probabilities are folded into one confidence value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceAggregator {
    GeometricMean,
    Min,
}

/// The escalation rule and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum PolicyConfig {
    /// Escalate when the reflected wrongness probability reaches `p`.
    Adaptive { p: f64 },
    /// Escalate when aggregated token confidence falls below `p`.
    Confidence {
        p: f64,
        aggregator: ConfidenceAggregator,
    },
    /// Escalate with fixed probability `p` from the policy's own PRNG.
    Random { p: f64, seed: u64 },
    /// Escalate every consecutive `k` steps.
    Sequential { k: u32 },
    Never,
    Always,
}

impl PolicyConfig {
    /// Validate parameter ranges. The adaptive threshold admits values
    /// above 1 on purpose: they are the documented degenerate form of
    /// `Never`, just as `p = 0` is `Always`.
    pub fn validate(&self) -> Result<(), PolicyError> {
        match self {
            PolicyConfig::Adaptive { p } => {
                if !p.is_finite() || *p < 0.0 {
                    return Err(PolicyError::InvalidParameter(format!(
                        "adaptive threshold must be finite and >= 0, got {p}"
                    )));
                }
            }
            PolicyConfig::Confidence { p, .. } => {
                if !p.is_finite() || *p <= 0.0 || *p > 1.0 {
                    return Err(PolicyError::InvalidParameter(format!(
                        "confidence threshold must lie in (0, 1], got {p}"
                    )));
                }
            }
            PolicyConfig::Random { p, .. } => {
                if !p.is_finite() || !(0.0..=1.0).contains(p) {
                    return Err(PolicyError::InvalidParameter(format!(
                        "random probability must lie in [0, 1], got {p}"
                    )));
                }
            }
            PolicyConfig::Sequential { k } => {
                if *k < 1 {
                    return Err(PolicyError::InvalidParameter(
                        "sequential period must be >= 1".into(),
                    ));
                }
            }
            PolicyConfig::Never | PolicyConfig::Always => {}
        }
        Ok(())
    }

    /// Fresh per-run state. `run_seed` is mixed into the random variant's
    /// seed so that batch records draw independent streams.
    pub fn initial_state(&self, run_seed: u64) -> PolicyState {
        match self {
            PolicyConfig::Random { seed, .. } => {
                let mixed =
                    crate::stable_hash(&["policy-random".into(), (*seed).into(), run_seed.into()]);
                PolicyState {
                    rng: Some(ChaCha8Rng::seed_from_u64(mixed)),
                }
            }
            _ => PolicyState { rng: None },
        }
    }
}

/// Per-run mutable policy state. Only the random variant carries any.
#[derive(Debug, Clone)]
pub struct PolicyState {
    rng: Option<ChaCha8Rng>,
}

/// The signals available when a local step is judged.
#[derive(Debug, Clone, Default)]
pub struct StepMeta {
    pub step_index: usize,
    pub error_prob: Option<f64>,
    pub token_logprobs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Keep,
    Escalate,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("policy requires {signal} but the step carries none")]
    MissingSignal { signal: &'static str },
    #[error("invalid policy parameter: {0}")]
    InvalidParameter(String),
    #[error("unrecognized policy spec {0:?}")]
    Unparsable(String),
}

/// Evaluate the policy for one step, updating the state in place.
pub fn decide(
    cfg: &PolicyConfig,
    state: &mut PolicyState,
    meta: &StepMeta,
) -> Result<Decision, PolicyError> {
    let escalate = match cfg {
        PolicyConfig::Adaptive { p } => {
            let prob = meta.error_prob.ok_or(PolicyError::MissingSignal {
                signal: "error_prob",
            })?;
            prob >= *p
        }
        PolicyConfig::Confidence { p, aggregator } => {
            let logprobs = meta
                .token_logprobs
                .as_deref()
                .filter(|l| !l.is_empty())
                .ok_or(PolicyError::MissingSignal {
                    signal: "token_logprobs",
                })?;
            let confidence = match aggregator {
                ConfidenceAggregator::GeometricMean => {
                    (logprobs.iter().sum::<f64>() / logprobs.len() as f64).exp()
                }
                ConfidenceAggregator::Min => logprobs.iter().cloned().fold(f64::MAX, f64::min).exp(),
            };
            confidence < *p
        }
        PolicyConfig::Random { p, .. } => {
            let rng = state.rng.as_mut().expect("random policy state has an rng");
            rng.random::<f64>() < *p
        }
        PolicyConfig::Sequential { k } => (meta.step_index + 1).is_multiple_of(*k as usize),
        PolicyConfig::Never => false,
        PolicyConfig::Always => true,
    };
    Ok(if escalate {
        Decision::Escalate
    } else {
        Decision::Keep
    })
}

impl FromStr for PolicyConfig {
    type Err = PolicyError;

    /// Parse the CLI policy grammar:
    /// `adaptive:p=0.5 | confidence:p=0.6,agg=geo | random:p=0.3,seed=17 |
    /// sequential:k=3 | never | always`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let spec = s.trim();
        let (name, args) = match spec.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a)),
            None => (spec, None),
        };
        let params = parse_params(args.unwrap_or(""));
        let get = |key: &str| -> Option<&str> {
            params
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
        };
        let parse_f64 = |key: &str| -> Result<f64, PolicyError> {
            get(key)
                .ok_or_else(|| PolicyError::Unparsable(format!("{spec} (missing {key})")))?
                .parse::<f64>()
                .map_err(|_| PolicyError::Unparsable(spec.to_string()))
        };
        let cfg = match name {
            "adaptive" => PolicyConfig::Adaptive { p: parse_f64("p")? },
            "confidence" => {
                let aggregator = match get("agg").unwrap_or("geo") {
                    "geo" | "geometric_mean" => ConfidenceAggregator::GeometricMean,
                    "min" => ConfidenceAggregator::Min,
                    other => {
                        return Err(PolicyError::Unparsable(format!(
                            "{spec} (unknown aggregator {other:?})"
                        )))
                    }
                };
                PolicyConfig::Confidence {
                    p: parse_f64("p")?,
                    aggregator,
                }
            }
            "random" => {
                let seed = get("seed")
                    .ok_or_else(|| PolicyError::Unparsable(format!("{spec} (missing seed)")))?
                    .parse::<u64>()
                    .map_err(|_| PolicyError::Unparsable(spec.to_string()))?;
                PolicyConfig::Random {
                    p: parse_f64("p")?,
                    seed,
                }
            }
            "sequential" => {
                let k = get("k")
                    .ok_or_else(|| PolicyError::Unparsable(format!("{spec} (missing k)")))?
                    .parse::<u32>()
                    .map_err(|_| PolicyError::Unparsable(spec.to_string()))?;
                PolicyConfig::Sequential { k }
            }
            "never" => PolicyConfig::Never,
            "always" => PolicyConfig::Always,
            _ => return Err(PolicyError::Unparsable(spec.to_string())),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_params(args: &str) -> Vec<(String, String)> {
    args.split(',')
        .filter_map(|pair| {
            let (k, v) = pair.split_once('=')?;
            Some((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

/// Human-readable form used in reports; inverse of the CLI grammar.
pub fn policy_spec(cfg: &PolicyConfig) -> String {
    match cfg {
        PolicyConfig::Adaptive { p } => format!("adaptive:p={p}"),
        PolicyConfig::Confidence { p, aggregator } => {
            let agg = match aggregator {
                ConfidenceAggregator::GeometricMean => "geo",
                ConfidenceAggregator::Min => "min",
            };
            format!("confidence:p={p},agg={agg}")
        }
        PolicyConfig::Random { p, seed } => format!("random:p={p},seed={seed}"),
        PolicyConfig::Sequential { k } => format!("sequential:k={k}"),
        PolicyConfig::Never => "never".into(),
        PolicyConfig::Always => "always".into(),
    }
}
