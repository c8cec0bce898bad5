//! Self-correcting data-science code generation.
//!
//! A forum dump becomes a knowledge base of post-plus-comment documents
//! behind a vector index. For each problem the engine retrieves once,
//! asks a CoT generator for guidance, generates code, and then loops
//! through syntax checking, execution and feedback-driven regeneration
//! until the tests pass or the attempt budget runs out. The bench harness
//! runs that loop over a problem set and reports pass@n, stop counts and
//! token usage.

pub mod bench;
pub mod config;
pub mod embed;
pub mod exec;
pub mod index;
pub mod ingest;
pub mod kb;
pub mod llm;
pub mod problem;
pub mod prompt;
pub mod refine;
pub mod retry;
pub mod setup;
pub mod tokenize;

pub use bench::{BenchReport, LibraryStats};
pub use config::{EngineConfig, Layer};
pub use exec::{ExecStatus, ExecutionResult, Feedback, FeedbackSource, SyntaxReport};
pub use ingest::KbDocument;
pub use kb::{KnowledgeBase, RetrievedDoc};
pub use llm::{Completion, Role, RoleStack, SamplingConfig, TokenUsage};
pub use problem::{Library, Problem, ProblemType};
pub use prompt::{CandidateCode, RenderedPrompt};
pub use refine::{AttemptRecord, Engine, FinalStatus, RunRecord};
