//! OpenAI-compatible `/chat/completions` backend.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendFactory, ChatBackend, Completion, LlmError, SamplingConfig, TokenUsage};
use crate::prompt::RenderedPrompt;
use crate::retry::{with_retry, RetryPolicy, Transient};
use crate::tokenize::{default_tokenizer, SharedTokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenAiSettings {
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_s: u64,
    pub retry: RetryPolicy,
}

impl Default for OpenAiSettings {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_s: 120,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug)]
struct CallError {
    status: Option<u16>,
    message: String,
    transient: bool,
    retry_after: Option<Duration>,
}

impl Transient for CallError {
    fn is_transient(&self) -> bool {
        self.transient
    }
    fn retry_after(&self) -> Option<Duration> {
        self.retry_after
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

#[derive(Debug, Clone)]
pub struct OpenAiBackend {
    inner: Arc<Inner>,
}

#[derive(Debug)]
struct Inner {
    url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    agent: ureq::Agent,
    tokenizer: SharedTokenizer,
}

impl OpenAiBackend {
    /// Reads the key from the configured environment variable. A missing
    /// key is allowed (local gateways often need none).
    pub fn new(settings: &OpenAiSettings) -> Self {
        let api_key = std::env::var(&settings.api_key_env).ok().filter(|k| !k.is_empty());
        Self::with_key(settings, api_key)
    }

    pub fn with_key(settings: &OpenAiSettings, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(settings.timeout_s.max(1))))
            .build()
            .into();
        Self {
            inner: Arc::new(Inner {
                url: format!("{}/chat/completions", settings.endpoint.trim_end_matches('/')),
                api_key,
                retry: settings.retry.clone(),
                agent,
                tokenizer: default_tokenizer(),
            }),
        }
    }

    fn call(&self, prompt: &RenderedPrompt, cfg: &SamplingConfig) -> Result<Completion, CallError> {
        let inner = &self.inner;
        let body = serde_json::json!({
            "model": cfg.model_name,
            "messages": [{"role": "user", "content": prompt.text}],
            "temperature": cfg.temperature,
            "top_p": cfg.top_p,
            "max_tokens": cfg.max_output_tokens,
        });
        let mut req = inner.agent.post(&inner.url);
        if let Some(key) = &inner.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| CallError { status: None, message: e.to_string(), transient: true, retry_after: None })?;
        let status = resp.status().as_u16();
        if status != 200 {
            let retry_after = resp
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<f64>().ok())
                .map(Duration::from_secs_f64);
            let message = resp.body_mut().read_to_string().unwrap_or_default();
            let transient = status == 429 || status >= 500;
            return Err(CallError { status: Some(status), message, transient, retry_after });
        }
        let parsed: ChatResponse = resp.body_mut().read_json().map_err(|e| CallError {
            status: Some(status),
            message: format!("decode: {e}"),
            transient: false,
            retry_after: None,
        })?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| CallError {
                status: Some(status),
                message: "decode: no message content".into(),
                transient: false,
                retry_after: None,
            })?;
        let usage = match parsed.usage {
            Some(u) => TokenUsage::new(u.prompt_tokens, u.completion_tokens),
            None => TokenUsage::new(
                inner.tokenizer.count(&prompt.text) as u64,
                inner.tokenizer.count(&text) as u64,
            ),
        };
        Ok(Completion { text, usage })
    }
}

impl ChatBackend for OpenAiBackend {
    fn complete(&self, prompt: &RenderedPrompt, cfg: &SamplingConfig) -> Result<Completion, LlmError> {
        let mut tries = 0;
        with_retry(&self.inner.retry, |n| {
            tries = n;
            self.call(prompt, cfg)
        })
        .map_err(|e| match e.status {
            Some(s @ (401 | 403)) => LlmError::Auth { status: s, message: e.message },
            Some(_) if e.message.starts_with("decode:") => LlmError::Decode(e.message),
            status => LlmError::Transport { attempts: tries, status, message: e.message },
        })
    }
}

impl BackendFactory for OpenAiBackend {
    fn for_problem(&self, _problem_id: &str) -> Result<Box<dyn ChatBackend>, LlmError> {
        Ok(Box::new(self.clone()))
    }
}
