//! OpenAI-compatible chat-completions backend.
//!
//! One generation is one `POST {base_url}/v1/chat/completions` round trip
//! with body `{model, messages, temperature, max_tokens, logprobs}`. The
//! reply content is split at the first `Action:` marker into thought and
//! action. Reflection appends a fixed verdict query and prefers the
//! log-probability of the `WRONG` verdict token; a numeric self-score in
//! [0, 1] is the fallback when no logprobs are available.
//!
//! Every call is bounded: per-attempt timeout times (retries + 1) attempts.
//! Transport failures and 5xx responses are retried, 4xx fail immediately.
//! The API key, when needed, comes from `ADASWITCH_API_KEY_<PROFILE_NAME>`.

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::metrics::TokenEstimator;

use super::{
    api_key_variable, Agent, AgentError, AgentProfile, ReflectRequest, StepProposal, StepRequest,
};

/// Fixed query appended to the context when asking for a verdict.
pub const VERDICT_QUERY: &str = "Was the last step wrong? Answer with a single word: WRONG or OK.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Whether the endpoint supports token logprobs.
    #[serde(default)]
    pub logprobs: bool,
    /// Optional CA bundle or other reserved fields may join later; keep the
    /// config strict for now.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_file: Option<PathBuf>,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    2
}

pub(super) struct RemoteSession {
    profile: AgentProfile,
    cfg: RemoteConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    estimator: Arc<dyn TokenEstimator>,
}

impl RemoteSession {
    pub(super) fn new(
        profile: AgentProfile,
        cfg: RemoteConfig,
        estimator: Arc<dyn TokenEstimator>,
    ) -> Result<Self, AgentError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| AgentError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        let api_key = match &cfg.api_key_file {
            Some(path) => std::fs::read_to_string(path)
                .ok()
                .map(|s| s.trim().to_string()),
            None => std::env::var(api_key_variable(&profile.name)).ok(),
        };
        Ok(Self {
            profile,
            cfg,
            client,
            api_key,
            estimator,
        })
    }

    fn post_chat(&self, body: &serde_json::Value) -> Result<ChatResponse, AgentError> {
        let url = format!(
            "{}/v1/chat/completions",
            self.cfg.base_url.trim_end_matches('/')
        );
        let attempts = self.cfg.retries + 1;
        let mut last_error = String::new();
        for _ in 0..attempts {
            let mut request = self.client.post(&url).json(body);
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            match request.send() {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        return response.json::<ChatResponse>().map_err(|e| {
                            AgentError::MalformedReply(format!("invalid response JSON: {e}"))
                        });
                    }
                    let body_text = response.text().unwrap_or_default();
                    if status.is_server_error() {
                        last_error = format!("status {status}: {body_text}");
                        continue;
                    }
                    return Err(AgentError::Http {
                        status: status.as_u16(),
                        body: body_text,
                    });
                }
                Err(e) => {
                    last_error = e.to_string();
                    continue;
                }
            }
        }
        Err(AgentError::Transport {
            attempts,
            message: last_error,
        })
    }

    fn chat_body(&self, content: String, max_tokens: u32, temperature: f64) -> serde_json::Value {
        let mut body = json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": temperature,
            "max_tokens": max_tokens,
            "logprobs": self.cfg.logprobs,
        });
        if let Some(top_k) = self.profile.sampling.top_k {
            body["top_k"] = json!(top_k);
        }
        body
    }
}

impl Agent for RemoteSession {
    fn profile(&self) -> &AgentProfile {
        &self.profile
    }

    fn generate_step(&mut self, request: &StepRequest<'_>) -> Result<StepProposal, AgentError> {
        let i = request.next_index;
        let prompt = format!(
            "{}Continue with step {i}. Reply with two lines:\nThought {i}: <reasoning>\nAction {i}: <action>",
            request.context
        );
        let body = self.chat_body(
            prompt.clone(),
            request.sampling.max_new_tokens,
            request.sampling.temperature,
        );
        let response = self.post_chat(&body)?;
        let choice = response
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| AgentError::MalformedReply("response has no choices".into()))?;
        let content = choice.message.content.unwrap_or_default();
        let (thought, action_text) = split_reply(&content)?;

        let logprobs: Option<Vec<f64>> = choice
            .logprobs
            .as_ref()
            .map(|l| l.content.iter().map(|t| t.logprob).collect());
        let prompt_tokens = response
            .usage
            .as_ref()
            .map(|u| u.prompt_tokens)
            .unwrap_or_else(|| self.estimator.count(&prompt));
        let generated_tokens = match &logprobs {
            Some(l) => l.len() as u64,
            None => response
                .usage
                .as_ref()
                .map(|u| u.completion_tokens)
                .unwrap_or_else(|| self.estimator.count(&content)),
        };
        Ok(StepProposal {
            thought,
            action_text,
            token_logprobs: logprobs,
            prompt_token_count: prompt_tokens,
            generated_token_count: generated_tokens,
        })
    }

    fn reflect(&mut self, request: &ReflectRequest<'_>) -> Result<f64, AgentError> {
        let prompt = format!("{}{VERDICT_QUERY}", request.context);
        let body = self.chat_body(prompt, 8, 0.0);
        let response = self.post_chat(&body)?;
        let choice = response
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| AgentError::ReflectionUnparsable("response has no choices".into()))?;
        wrongness_from_choice(&choice)
    }
}

/// Split a generation reply at the first `Action:` marker (with or without
/// a step number); the text before it, minus any `Thought:` prefix, is the
/// thought.
pub(crate) fn split_reply(content: &str) -> Result<(String, String), AgentError> {
    static ACTION: OnceLock<Regex> = OnceLock::new();
    static THOUGHT: OnceLock<Regex> = OnceLock::new();
    let action_re = ACTION
        .get_or_init(|| Regex::new(r"(?m)^\s*Action(?:\s+\d+)?\s*:\s*(.*)$").expect("regex"));
    let thought_re =
        THOUGHT.get_or_init(|| Regex::new(r"^\s*Thought(?:\s+\d+)?\s*:\s*").expect("regex"));
    let captures = action_re
        .captures(content)
        .ok_or_else(|| AgentError::MalformedReply(format!("no Action marker in {content:?}")))?;
    let action_match = captures.get(0).expect("whole match");
    let action_text = captures.get(1).expect("group").as_str().trim().to_string();
    if action_text.is_empty() {
        return Err(AgentError::MalformedReply("empty action line".into()));
    }
    let before = &content[..action_match.start()];
    let thought = thought_re.replace(before, "").trim().to_string();
    Ok((thought, action_text))
}

/// Wrongness probability from a verdict reply: exp(logprob of the `WRONG`
/// token) when available, else a numeric self-score in [0, 1] parsed from
/// the text.
fn wrongness_from_choice(choice: &ChatChoice) -> Result<f64, AgentError> {
    if let Some(logprobs) = &choice.logprobs {
        if let Some(first) = logprobs.content.first() {
            let mut candidates = vec![(first.token.as_str(), first.logprob)];
            for alt in &first.top_logprobs {
                candidates.push((alt.token.as_str(), alt.logprob));
            }
            for (token, logprob) in candidates {
                if token.trim() == "WRONG" {
                    return Ok(logprob.exp().clamp(0.0, 1.0));
                }
            }
        }
    }
    let content = choice.message.content.as_deref().unwrap_or("");
    static NUMBER: OnceLock<Regex> = OnceLock::new();
    let re = NUMBER.get_or_init(|| Regex::new(r"\d*\.?\d+").expect("regex"));
    for m in re.find_iter(content) {
        if let Ok(value) = m.as_str().parse::<f64>() {
            if (0.0..=1.0).contains(&value) {
                return Ok(value);
            }
        }
    }
    Err(AgentError::ReflectionUnparsable(format!(
        "no WRONG logprob and no numeric score in {content:?}"
    )))
}

// --- Response shapes (the subset we read) ---

#[derive(Debug, Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Default, Deserialize)]
struct ChatChoice {
    #[serde(default)]
    message: ChatMessage,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Default, Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    #[serde(default)]
    content: Vec<TokenLogprob>,
}

#[derive(Debug, Deserialize)]
struct TokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Debug, Deserialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
}

#[derive(Debug, Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_reply_variants() {
        let (t, a) = split_reply("Thought 2: add the eggs\nAction 2: Calculator(2+3)").unwrap();
        assert_eq!(t, "add the eggs");
        assert_eq!(a, "Calculator(2+3)");

        let (t, a) = split_reply("just thinking\nAction: Finish(4)").unwrap();
        assert_eq!(t, "just thinking");
        assert_eq!(a, "Finish(4)");

        assert!(split_reply("no markers here").is_err());
        assert!(split_reply("Action:   ").is_err());
    }

    fn choice_from_json(json: serde_json::Value) -> ChatChoice {
        serde_json::from_value(json).unwrap()
    }

    #[test]
    fn wrongness_prefers_verdict_token_logprob() {
        let choice = choice_from_json(serde_json::json!({
            "message": {"content": "WRONG"},
            "logprobs": {"content": [
                {"token": "WRONG", "logprob": -0.2231435513, "top_logprobs": []}
            ]}
        }));
        let p = wrongness_from_choice(&choice).unwrap();
        assert!((p - 0.8).abs() < 1e-9);
    }

    #[test]
    fn wrongness_finds_token_in_top_logprobs() {
        let choice = choice_from_json(serde_json::json!({
            "message": {"content": "OK"},
            "logprobs": {"content": [
                {"token": "OK", "logprob": -0.1, "top_logprobs": [
                    {"token": "WRONG", "logprob": -1.6094379124341003}
                ]}
            ]}
        }));
        let p = wrongness_from_choice(&choice).unwrap();
        assert!((p - 0.2).abs() < 1e-9);
    }

    #[test]
    fn wrongness_falls_back_to_numeric_score() {
        let choice = choice_from_json(serde_json::json!({
            "message": {"content": "I estimate the step is wrong with probability 0.35."}
        }));
        assert_eq!(wrongness_from_choice(&choice).unwrap(), 0.35);
    }

    #[test]
    fn wrongness_errors_without_signal() {
        let choice = choice_from_json(serde_json::json!({
            "message": {"content": "definitely fine"}
        }));
        assert!(matches!(
            wrongness_from_choice(&choice),
            Err(AgentError::ReflectionUnparsable(_))
        ));
    }
}
