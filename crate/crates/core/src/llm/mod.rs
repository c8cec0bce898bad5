//! Chat-completion clients and token accounting.

mod mock;
mod openai;

use std::collections::BTreeMap;
use std::ops::{Add, AddAssign};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{PromptKind, RenderedPrompt};

pub use mock::{MockBackend, MockEntry, MockTranscripts, StepMatch};
pub use openai::{OpenAiBackend, OpenAiSettings};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("invalid sampling config: {0}")]
    Config(String),
    #[error("authentication rejected (HTTP {status}): {message}")]
    Auth { status: u16, message: String },
    #[error("request failed after {attempts} tries{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Transport { attempts: u32, status: Option<u16>, message: String },
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("mock transcript, step {step}: {message}")]
    Mock { step: usize, message: String },
    #[error("no backend registered for model `{0}`")]
    UnknownModel(String),
    /// A failure reproduced from a recorded run.
    #[error("{0}")]
    Replayed(String),
}

impl LlmError {
    /// Permanent failures end a problem's run as infrastructure-failed.
    pub fn is_permanent(&self) -> bool {
        !matches!(self, LlmError::Transport { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub model_name: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: u32,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { model_name: "gpt-4".into(), temperature: 0.9, top_p: 0.9, max_output_tokens: 2048 }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::Config(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LlmError::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.max_output_tokens == 0 {
            return Err(LlmError::Config("max_output_tokens must be positive".into()));
        }
        if self.model_name.trim().is_empty() {
            return Err(LlmError::Config("model_name is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenUsage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self { prompt_tokens, completion_tokens }
    }

    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl Add for TokenUsage {
    type Output = TokenUsage;
    fn add(self, o: TokenUsage) -> TokenUsage {
        TokenUsage::new(self.prompt_tokens + o.prompt_tokens, self.completion_tokens + o.completion_tokens)
    }
}

impl AddAssign for TokenUsage {
    fn add_assign(&mut self, o: TokenUsage) {
        *self = *self + o;
    }
}

impl std::iter::Sum for TokenUsage {
    fn sum<I: Iterator<Item = TokenUsage>>(iter: I) -> Self {
        iter.fold(TokenUsage::default(), Add::add)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Cot,
    Code,
}

/// Model assignment per role; the two may differ.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RoleStack {
    pub cot_model: SamplingConfig,
    pub code_model: SamplingConfig,
}

impl RoleStack {
    pub fn for_role(&self, role: Role) -> &SamplingConfig {
        match role {
            Role::Cot => &self.cot_model,
            Role::Code => &self.code_model,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        self.cot_model.validate()?;
        self.code_model.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: TokenUsage,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, prompt: &RenderedPrompt, cfg: &SamplingConfig) -> Result<Completion, LlmError>;
}

/// Makes the backend one problem's run talks to. Mock factories hand out a
/// fresh transcript cursor per problem; remote factories share a client.
pub trait BackendFactory: Send + Sync {
    fn for_problem(&self, problem_id: &str) -> Result<Box<dyn ChatBackend>, LlmError>;
}

/// Model name to backend factory, with an optional catch-all.
#[derive(Clone, Default)]
pub struct BackendRegistry {
    by_model: BTreeMap<String, Arc<dyn BackendFactory>>,
    fallback: Option<Arc<dyn BackendFactory>>,
}

impl std::fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendRegistry")
            .field("models", &self.by_model.keys().collect::<Vec<_>>())
            .field("fallback", &self.fallback.is_some())
            .finish()
    }
}

impl BackendRegistry {
    pub fn single(f: Arc<dyn BackendFactory>) -> Self {
        Self { by_model: BTreeMap::new(), fallback: Some(f) }
    }

    pub fn register(&mut self, model: impl Into<String>, f: Arc<dyn BackendFactory>) {
        self.by_model.insert(model.into(), f);
    }

    pub fn resolve(&self, model: &str) -> Result<Arc<dyn BackendFactory>, LlmError> {
        self.by_model.get(model).or(self.fallback.as_ref()).cloned().ok_or_else(|| LlmError::UnknownModel(model.into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub attempt: usize,
    pub role: Role,
    pub kind: PromptKind,
    pub usage: TokenUsage,
}

/// Append-only usage log, safe to share.
#[derive(Debug, Default)]
pub struct UsageLedger {
    entries: Mutex<Vec<LedgerEntry>>,
}

impl UsageLedger {
    pub fn record(&self, entry: LedgerEntry) {
        self.entries.lock().expect("ledger lock").push(entry);
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.entries.lock().expect("ledger lock").clone()
    }

    pub fn total(&self) -> TokenUsage {
        self.entries.lock().expect("ledger lock").iter().map(|e| e.usage).sum()
    }
}

/// Per-problem client: routes each role to its backend and records usage
/// once per successful call.
pub struct LlmClient {
    stack: RoleStack,
    backends: Vec<Box<dyn ChatBackend>>,
    /// Index into `backends` for the cot and code roles.
    route: [usize; 2],
    ledger: UsageLedger,
}

impl LlmClient {
    pub fn new(stack: RoleStack, registry: &BackendRegistry, problem_id: &str) -> Result<Self, LlmError> {
        stack.validate()?;
        let cot_f = registry.resolve(&stack.cot_model.model_name)?;
        let code_f = registry.resolve(&stack.code_model.model_name)?;
        let mut backends = vec![cot_f.for_problem(problem_id)?];
        // one factory serving both roles hands out a single cursor, so the
        // roles interleave through one transcript
        let route = if std::ptr::addr_eq(Arc::as_ptr(&cot_f), Arc::as_ptr(&code_f)) {
            [0, 0]
        } else {
            backends.push(code_f.for_problem(problem_id)?);
            [0, 1]
        };
        Ok(Self { stack, backends, route, ledger: UsageLedger::default() })
    }

    pub fn from_backend(stack: RoleStack, backend: Box<dyn ChatBackend>) -> Self {
        Self { stack, backends: vec![backend], route: [0, 0], ledger: UsageLedger::default() }
    }

    pub fn complete(&self, role: Role, attempt: usize, prompt: &RenderedPrompt) -> Result<Completion, LlmError> {
        let cfg = self.stack.for_role(role);
        let slot = match role {
            Role::Cot => self.route[0],
            Role::Code => self.route[1],
        };
        let out = self.backends[slot].complete(prompt, cfg)?;
        self.ledger.record(LedgerEntry { attempt, role, kind: prompt.kind, usage: out.usage });
        Ok(out)
    }

    pub fn ledger(&self) -> &UsageLedger {
        &self.ledger
    }
}
