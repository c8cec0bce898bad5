//! Build the engine's collaborators from a resolved config.

use std::fs;
use std::sync::Arc;

use thiserror::Error;

use crate::config::{BackendKind, EmbedderConfig, EmbedderKind, EngineConfig, ExecutorKind};
use crate::embed::{HashProjectionEmbedder, RemoteEmbedder, SharedEmbedder};
use crate::exec::{manifest_id, ExecError, ExecutorFactory, MockExecutor, PythonSyntaxChecker, ShimExecutor, BUILTIN_MANIFEST};
use crate::kb::{KbError, KnowledgeBase, Retriever};
use crate::llm::{BackendRegistry, LlmError, MockTranscripts, OpenAiBackend};
use crate::prompt::{PromptBuilder, PromptError};
use crate::refine::Engine;
use crate::retry::RetryPolicy;
use crate::tokenize;

#[derive(Debug, Error)]
pub enum SetupError {
    /// Bad or missing user input; nothing external was at fault.
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Kb(#[from] KbError),
}

impl SetupError {
    /// True when the environment, not the user's input, is at fault.
    pub fn is_infra(&self) -> bool {
        matches!(self, SetupError::Exec(ExecError::Toolchain(_) | ExecError::Io(_)))
    }
}

pub fn embedder(cfg: &EmbedderConfig) -> SharedEmbedder {
    match cfg.provider {
        EmbedderKind::HashProjection => Arc::new(HashProjectionEmbedder::new(cfg.dimension, cfg.seed)),
        EmbedderKind::Remote => {
            let key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
            Arc::new(RemoteEmbedder::new(&cfg.endpoint, &cfg.model, key, cfg.dimension, RetryPolicy::default()))
        }
    }
}

pub fn registry(cfg: &EngineConfig) -> Result<BackendRegistry, SetupError> {
    Ok(match cfg.backend.kind {
        BackendKind::Mock => {
            let path = cfg
                .backend
                .transcripts
                .as_ref()
                .ok_or_else(|| SetupError::Config("backend.transcripts is required for the mock backend".into()))?;
            let tokenizer = tokenizer(cfg)?;
            BackendRegistry::single(Arc::new(MockTranscripts::load(path)?.with_tokenizer(tokenizer)))
        }
        BackendKind::Openai => BackendRegistry::single(Arc::new(OpenAiBackend::new(&cfg.backend.openai))),
    })
}

pub fn executor(cfg: &EngineConfig) -> Result<Arc<dyn ExecutorFactory>, SetupError> {
    let x = &cfg.executor;
    Ok(match x.kind {
        ExecutorKind::Mock => match &x.script {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| SetupError::Config(format!("executor.script {}: {e}", path.display())))?;
                let mock: MockExecutor = serde_json::from_str(&text)
                    .map_err(|e| SetupError::Config(format!("executor.script {}: {e}", path.display())))?;
                Arc::new(mock)
            }
            None => Arc::new(MockExecutor::default()),
        },
        ExecutorKind::Real => {
            let (name, contents) = match &x.manifest {
                Some(p) => (
                    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "manifest".into()),
                    fs::read_to_string(p).map_err(|e| SetupError::Config(format!("executor.manifest {}: {e}", p.display())))?,
                ),
                None => ("ds1000".to_string(), BUILTIN_MANIFEST.to_string()),
            };
            let checker = PythonSyntaxChecker::new(&x.python)?;
            Arc::new(ShimExecutor::new(x.shim_command.clone(), manifest_id(&name, &contents), checker)?)
        }
    })
}

fn tokenizer(cfg: &EngineConfig) -> Result<tokenize::SharedTokenizer, SetupError> {
    tokenize::by_name(&cfg.kb.tokenizer).ok_or_else(|| SetupError::Config(format!("unknown tokenizer `{}`", cfg.kb.tokenizer)))
}

/// The knowledge base named by `paths.index`, if any.
pub fn retriever(cfg: &EngineConfig) -> Result<Option<Arc<dyn Retriever>>, SetupError> {
    let Some(index) = &cfg.paths.index else { return Ok(None) };
    let kb = KnowledgeBase::open(index, cfg.paths.documents.as_deref(), embedder(&cfg.kb.embedder))?;
    Ok(Some(Arc::new(kb)))
}

pub fn engine(cfg: &EngineConfig) -> Result<Engine, SetupError> {
    let prompts = PromptBuilder::from_config(cfg.prompt.clone(), tokenizer(cfg)?)?;
    let mut engine = Engine::new(cfg.clone(), prompts, registry(cfg)?, executor(cfg)?);
    if cfg.ablation.auto_cot_1 {
        if let Some(r) = retriever(cfg)? {
            engine = engine.with_retriever(r);
        }
    }
    Ok(engine)
}
