//! Engine configuration, resolved from defaults, a JSON file, environment
//! variables and command-line overrides (later layers win).
//!
//! Environment variables use the `DSREFINE__` prefix with `__` between
//! path segments: `DSREFINE__LLM__COT_MODEL__TEMPERATURE=0.2`. Secrets are
//! never read from files; backends name the variable that holds them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::embed::{EmbedderSpec, DEFAULT_DIMENSION, DEFAULT_REMOTE_MODEL};
use crate::exec::ExecLimits;
use crate::ingest::{DEFAULT_BUDGET, DEFAULT_MIN_COMMENTS};
use crate::kb::IndexConfig;
use crate::llm::{OpenAiSettings, RoleStack};
use crate::prompt::PromptConfig;

pub const ENV_PREFIX: &str = "DSREFINE__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Default,
    File,
    Env,
    Flag,
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layer::Default => "default",
            Layer::File => "config file",
            Layer::Env => "environment",
            Layer::Flag => "command line",
        })
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{layer}: `{key}` {message}")]
    Key { key: String, layer: Layer, message: String },
    #[error("config file {path}: {message}")]
    File { path: String, message: String },
}

/// How `n_max` maps to code generations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptSemantics {
    /// `n_max` generations in total.
    #[default]
    Total,
    /// `n_max - 1` generations (at least one), the literal loop bound
    /// `for i in range(1, n)`.
    LoopBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub auto_cot_1: bool,
    pub auto_cot_2: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { auto_cot_1: true, auto_cot_2: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    HashProjection,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub provider: EmbedderKind,
    pub dimension: usize,
    pub seed: u64,
    pub model: String,
    pub endpoint: String,
    pub api_key_env: String,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            provider: EmbedderKind::HashProjection,
            dimension: DEFAULT_DIMENSION,
            seed: 0x5EED,
            model: DEFAULT_REMOTE_MODEL.into(),
            endpoint: "https://api.openai.com/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
        }
    }
}

impl EmbedderConfig {
    pub fn spec(&self) -> EmbedderSpec {
        match self.provider {
            EmbedderKind::HashProjection => EmbedderSpec::HashProjection { dimension: self.dimension, seed: self.seed },
            EmbedderKind::Remote => EmbedderSpec::Remote { dimension: self.dimension, model: self.model.clone() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KbConfig {
    pub budget: usize,
    pub min_comments: usize,
    pub tokenizer: String,
    pub embedder: EmbedderConfig,
    pub index: IndexConfig,
}

impl Default for KbConfig {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            min_comments: DEFAULT_MIN_COMMENTS,
            tokenizer: "rule-v1".into(),
            embedder: EmbedderConfig::default(),
            index: IndexConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Openai,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Mock transcript file.
    pub transcripts: Option<PathBuf>,
    pub openai: OpenAiSettings,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self { kind: BackendKind::Mock, transcripts: None, openai: OpenAiSettings::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    #[default]
    Mock,
    Real,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutorConfig {
    pub kind: ExecutorKind,
    /// Mock executor script (JSON).
    pub script: Option<PathBuf>,
    pub python: String,
    /// Runner shim command line, e.g. `["python3", "runner_shim.py"]`.
    pub shim_command: Vec<String>,
    /// Pinned library manifest; the built-in one when absent.
    pub manifest: Option<PathBuf>,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self { kind: ExecutorKind::Mock, script: None, python: "python3".into(), shim_command: Vec::new(), manifest: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub documents: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub llm: RoleStack,
    pub ablation: Ablation,
    pub n_max: usize,
    pub attempt_semantics: AttemptSemantics,
    pub retrieval: RetrievalConfig,
    pub limits: ExecLimits,
    pub kb: KbConfig,
    pub prompt: PromptConfig,
    pub backend: BackendConfig,
    pub executor: ExecutorConfig,
    pub paths: PathsConfig,
    pub workers: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            llm: RoleStack::default(),
            ablation: Ablation::default(),
            n_max: 5,
            attempt_semantics: AttemptSemantics::Total,
            retrieval: RetrievalConfig::default(),
            limits: ExecLimits::default(),
            kb: KbConfig::default(),
            prompt: PromptConfig::default(),
            backend: BackendConfig::default(),
            executor: ExecutorConfig::default(),
            paths: PathsConfig::default(),
            workers: 4,
        }
    }
}

impl EngineConfig {
    /// Number of code generations a run may make.
    pub fn attempt_budget(&self) -> usize {
        match self.attempt_semantics {
            AttemptSemantics::Total => self.n_max,
            AttemptSemantics::LoopBound => self.n_max.saturating_sub(1).max(1),
        }
    }

    /// Range and consistency checks, each returning the offending key.
    pub fn check(&self) -> Result<(), (String, String)> {
        for (role, m) in [("cot_model", &self.llm.cot_model), ("code_model", &self.llm.code_model)] {
            if !(0.0..=2.0).contains(&m.temperature) {
                return Err((format!("llm.{role}.temperature"), format!("{} is outside [0, 2]", m.temperature)));
            }
            if !(m.top_p > 0.0 && m.top_p <= 1.0) {
                return Err((format!("llm.{role}.top_p"), format!("{} is outside (0, 1]", m.top_p)));
            }
            if m.max_output_tokens == 0 {
                return Err((format!("llm.{role}.max_output_tokens"), "must be positive".into()));
            }
        }
        if self.n_max == 0 {
            return Err(("n_max".into(), "must be at least 1".into()));
        }
        if self.retrieval.k == 0 {
            return Err(("retrieval.k".into(), "must be at least 1".into()));
        }
        if self.kb.budget == 0 {
            return Err(("kb.budget".into(), "must be positive".into()));
        }
        if self.kb.embedder.dimension == 0 {
            return Err(("kb.embedder.dimension".into(), "must be positive".into()));
        }
        if crate::tokenize::by_name(&self.kb.tokenizer).is_none() {
            return Err(("kb.tokenizer".into(), format!("unknown tokenizer `{}`", self.kb.tokenizer)));
        }
        if self.kb.index.hnsw.m < 2 {
            return Err(("kb.index.hnsw.m".into(), "must be at least 2".into()));
        }
        if !(self.limits.timeout_s > 0.0 && self.limits.timeout_s.is_finite()) {
            return Err(("limits.timeout_s".into(), "must be a positive number of seconds".into()));
        }
        if self.workers == 0 {
            return Err(("workers".into(), "must be at least 1".into()));
        }
        if self.executor.kind == ExecutorKind::Real && self.executor.shim_command.is_empty() {
            return Err(("executor.shim_command".into(), "is required when executor.kind is `real`".into()));
        }
        Ok(())
    }
}

/// Raw inputs to [`resolve_config`].
#[derive(Debug, Clone, Default)]
pub struct ConfigSources {
    pub file: Option<PathBuf>,
    /// `(name, value)` pairs; only `DSREFINE__*` names are used.
    pub env: Vec<(String, String)>,
    /// `(dotted.key, value)` pairs from the command line.
    pub flags: Vec<(String, String)>,
}

impl ConfigSources {
    pub fn from_process_env(file: Option<PathBuf>, flags: Vec<(String, String)>) -> Self {
        Self { file, env: std::env::vars().collect(), flags }
    }
}

/// The resolved config plus the layer that last set each key.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: EngineConfig,
    pub origins: BTreeMap<String, Layer>,
}

fn lookup<'a>(tree: &'a Value, path: &[&str]) -> Option<&'a Value> {
    path.iter().try_fold(tree, |v, seg| v.as_object()?.get(*seg))
}

fn set_path(
    tree: &mut Value,
    defaults: &Value,
    key: &str,
    value: Value,
    layer: Layer,
    origins: &mut BTreeMap<String, Layer>,
) -> Result<(), ConfigError> {
    let path: Vec<&str> = key.split('.').collect();
    let bad = |m: &str| ConfigError::Key { key: key.to_string(), layer, message: m.to_string() };
    if path.iter().any(|s| s.is_empty()) || lookup(defaults, &path).is_none() {
        return Err(bad("is not a known key"));
    }
    let mut cur = tree;
    for seg in &path[..path.len() - 1] {
        let obj = cur.as_object_mut().ok_or_else(|| bad("is not an object"))?;
        cur = obj.entry(seg.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = cur.as_object_mut().ok_or_else(|| bad("is not an object"))?;
    obj.insert(path[path.len() - 1].to_string(), value);
    origins.insert(key.to_string(), layer);
    Ok(())
}

/// Flatten a file's JSON object into dotted keys; objects whose default is
/// a map or an opaque value stop the descent.
fn flatten(prefix: &str, v: &Value, defaults: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let path: Vec<&str> = key.split('.').collect();
                let descend = matches!(lookup(defaults, &path), Some(Value::Object(d)) if !d.is_empty());
                if descend && child.is_object() {
                    flatten(&key, child, defaults, out);
                } else {
                    out.push((key, child.clone()));
                }
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

/// Parse a scalar override: JSON when it parses, otherwise a bare string.
fn scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

pub fn resolve_config(sources: &ConfigSources) -> Result<Resolved, ConfigError> {
    let defaults = serde_json::to_value(EngineConfig::default()).expect("defaults serialize");
    let mut tree = defaults.clone();
    let mut origins = BTreeMap::new();

    if let Some(path) = &sources.file {
        let file_err = |m: String| ConfigError::File { path: path.display().to_string(), message: m };
        let text = std::fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        let parsed: Value = serde_json::from_str(&text).map_err(|e| file_err(e.to_string()))?;
        if !parsed.is_object() {
            return Err(file_err("top level must be a JSON object".into()));
        }
        let mut pairs = Vec::new();
        flatten("", &parsed, &defaults, &mut pairs);
        for (k, v) in pairs {
            set_path(&mut tree, &defaults, &k, v, Layer::File, &mut origins)?;
        }
    }
    let mut env: Vec<_> = sources.env.iter().filter_map(|(k, v)| Some((k.strip_prefix(ENV_PREFIX)?, v))).collect();
    env.sort();
    for (k, v) in env {
        let key = k.split("__").map(str::to_ascii_lowercase).collect::<Vec<_>>().join(".");
        set_path(&mut tree, &defaults, &key, scalar(v), Layer::Env, &mut origins)?;
    }
    for (k, v) in &sources.flags {
        set_path(&mut tree, &defaults, k, scalar(v), Layer::Flag, &mut origins)?;
    }

    let config: EngineConfig = serde_path_to_error::deserialize(&tree).map_err(|e| {
        let key = e.path().to_string();
        let layer = origins.get(&key).copied().unwrap_or(Layer::Default);
        ConfigError::Key { key, layer, message: e.into_inner().to_string() }
    })?;
    config.check().map_err(|(key, message)| {
        let layer = origins.get(&key).copied().unwrap_or(Layer::Default);
        ConfigError::Key { key, layer, message }
    })?;
    Ok(Resolved { config, origins })
}
