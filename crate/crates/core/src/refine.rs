//! The self-correcting loop: retrieve once, Auto-CoT 1, initial code, then
//! check, execute, Auto-CoT 2 and regenerate until a pass or the attempt
//! budget runs out. Every run yields a [`RunRecord`] holding the prompts,
//! cached model responses and executor results, enough to replay it
//! without any backend.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::config::EngineConfig;
use crate::exec::{
    CodeExecutor, ExecError, ExecLimits, ExecStatus, ExecutionResult, ExecutorFactory, Feedback, SyntaxReport,
};
use crate::kb::{KbError, RetrievedDoc, Retriever};
use crate::llm::{
    BackendFactory, BackendRegistry, ChatBackend, Completion, LedgerEntry, LlmClient, LlmError, Role,
    SamplingConfig, TokenUsage,
};
use crate::problem::{Library, Problem};
use crate::prompt::{extract_code, CandidateCode, PromptBuilder, RenderedPrompt};
use crate::tokenize;

/// Syntax message for a model reply with no extractable code.
pub const NO_CODE_MESSAGE: &str = "SyntaxError: the response contained no code";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalStatus {
    Pass,
    Fail,
    InfraFail,
}

/// Where an infrastructure failure happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    LlmSetup,
    ExecutorSetup,
    Retrieve,
    Prompt,
    CotGeneration,
    CodeGeneration,
    SyntaxCheck,
    Execution,
    EnvironmentReset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt_index: usize,
    /// Absent when the CoT generator for this attempt is disabled.
    pub cot_prompt: Option<RenderedPrompt>,
    pub cot_response: Option<Completion>,
    pub code_prompt: RenderedPrompt,
    pub code_response: Option<Completion>,
    /// Absent when the reply held no code; `syntax` then reports it.
    pub candidate: Option<CandidateCode>,
    pub syntax: SyntaxReport,
    /// Skipped on syntax failure.
    pub execution: Option<ExecutionResult>,
    /// A first execution that hit an environment fault and was retried
    /// after a reset. Never attributed to the candidate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_error: Option<ExecutionResult>,
    /// Absent exactly when the attempt passed.
    pub feedback_out: Option<Feedback>,
    pub usage: TokenUsage,
}

/// What an attempt got through before an infrastructure failure.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PartialAttempt {
    pub cot_prompt: Option<RenderedPrompt>,
    pub cot_response: Option<Completion>,
    pub code_prompt: Option<RenderedPrompt>,
    pub code_response: Option<Completion>,
    pub candidate: Option<CandidateCode>,
    pub syntax: Option<SyntaxReport>,
    pub env_error: Option<ExecutionResult>,
    pub execution: Option<ExecutionResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfraFailure {
    pub attempt: usize,
    pub stage: Stage,
    pub message: String,
    pub partial: PartialAttempt,
    pub usage: TokenUsage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub problem_id: String,
    pub library: Library,
    pub problem: Problem,
    /// Documents retrieved for Auto-CoT 1; absent when retrieval did not run.
    pub retrieval: Option<Vec<RetrievedDoc>>,
    pub attempts: Vec<AttemptRecord>,
    pub final_status: FinalStatus,
    /// Attempt at which the run stopped. For infrastructure failures this
    /// is the failing attempt, which is not in `attempts`.
    pub stop_attempt: usize,
    pub infra_failure: Option<InfraFailure>,
    /// Sum of attempt usages plus any usage of the failed partial attempt.
    pub usage: TokenUsage,
    pub ledger: Vec<LedgerEntry>,
    pub config_snapshot: EngineConfig,
}

impl RunRecord {
    pub fn passed(&self) -> bool {
        self.final_status == FinalStatus::Pass
    }

    /// Check the structural invariants every emitted record satisfies.
    pub fn check_invariants(&self) -> Result<(), String> {
        let budget = self.config_snapshot.attempt_budget();
        if self.stop_attempt < 1 || self.stop_attempt > budget {
            return Err(format!("stop_attempt {} outside 1..={budget}", self.stop_attempt));
        }
        let expected_len = match self.final_status {
            FinalStatus::InfraFail => self.stop_attempt - 1,
            _ => self.stop_attempt,
        };
        if self.attempts.len() != expected_len {
            return Err(format!("{} attempts recorded, expected {expected_len}", self.attempts.len()));
        }
        for (i, a) in self.attempts.iter().enumerate() {
            if a.attempt_index != i + 1 {
                return Err(format!("attempt {} has index {}", i + 1, a.attempt_index));
            }
            if a.execution.is_none() == a.syntax.ok {
                return Err(format!("attempt {}: execution presence disagrees with syntax", i + 1));
            }
            let passed = a.execution.as_ref().is_some_and(|e| e.status == ExecStatus::Pass);
            if passed == a.feedback_out.is_some() {
                return Err(format!("attempt {}: feedback presence disagrees with result", i + 1));
            }
            if passed && i + 1 != self.attempts.len() {
                return Err(format!("attempt {} passed but the run continued", i + 1));
            }
        }
        let last_passed = self.attempts.last().is_some_and(|a| a.feedback_out.is_none());
        if (self.final_status == FinalStatus::Pass) != last_passed {
            return Err("final status disagrees with the last attempt".into());
        }
        if (self.final_status == FinalStatus::InfraFail) != self.infra_failure.is_some() {
            return Err("infra failure presence disagrees with final status".into());
        }
        let attempts: TokenUsage = self.attempts.iter().map(|a| a.usage).sum();
        let infra = self.infra_failure.as_ref().map(|f| f.usage).unwrap_or_default();
        if attempts + infra != self.usage {
            return Err(format!("usage {:?} != attempts {:?} + infra {:?}", self.usage, attempts, infra));
        }
        let ledger: TokenUsage = self.ledger.iter().map(|e| e.usage).sum();
        if ledger != self.usage {
            return Err(format!("ledger {ledger:?} != usage {:?}", self.usage));
        }
        Ok(())
    }

    /// Drop cached model responses, e.g. to shrink archived records.
    /// The result can no longer be replayed.
    pub fn strip_responses(&mut self) {
        for a in &mut self.attempts {
            a.cot_response = None;
            a.code_response = None;
        }
        if let Some(f) = &mut self.infra_failure {
            f.partial.cot_response = None;
            f.partial.code_response = None;
        }
    }
}

/// Everything one solve needs, shareable across worker threads.
pub struct Engine {
    config: EngineConfig,
    prompts: PromptBuilder,
    registry: BackendRegistry,
    executors: Arc<dyn ExecutorFactory>,
    retriever: Option<Arc<dyn Retriever>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("registry", &self.registry)
            .field("retriever", &self.retriever.is_some())
            .finish_non_exhaustive()
    }
}

struct Failure {
    stage: Stage,
    message: String,
}

fn fail(stage: Stage) -> impl FnOnce(&dyn std::fmt::Display) -> Failure {
    move |e| Failure { stage, message: e.to_string() }
}

impl Engine {
    pub fn new(
        config: EngineConfig,
        prompts: PromptBuilder,
        registry: BackendRegistry,
        executors: Arc<dyn ExecutorFactory>,
    ) -> Self {
        Self { config, prompts, registry, executors, retriever: None }
    }

    pub fn with_retriever(mut self, retriever: Arc<dyn Retriever>) -> Self {
        self.retriever = Some(retriever);
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut EngineConfig {
        &mut self.config
    }

    /// Solve one problem. Never panics on backend trouble: failures end the
    /// record as `infra_fail` with the stage named.
    pub fn solve(&self, problem: &Problem) -> RunRecord {
        let mut rec = RunRecord {
            problem_id: problem.id.clone(),
            library: problem.library,
            problem: problem.clone(),
            retrieval: None,
            attempts: Vec::new(),
            final_status: FinalStatus::Fail,
            stop_attempt: 1,
            infra_failure: None,
            usage: TokenUsage::default(),
            ledger: Vec::new(),
            config_snapshot: self.config.clone(),
        };
        let client = match LlmClient::new(self.config.llm.clone(), &self.registry, &problem.id) {
            Ok(c) => c,
            Err(e) => {
                record_infra(&mut rec, 1, Failure { stage: Stage::LlmSetup, message: e.to_string() }, PartialAttempt::default());
                return rec;
            }
        };
        let executor = match self.executors.for_problem(&problem.id) {
            Ok(x) => x,
            Err(e) => {
                record_infra(&mut rec, 1, Failure { stage: Stage::ExecutorSetup, message: e.to_string() }, PartialAttempt::default());
                return rec;
            }
        };
        self.drive(problem, &client, executor.as_ref(), &mut rec);
        rec.ledger = client.ledger().entries();
        rec
    }

    fn drive(&self, problem: &Problem, client: &LlmClient, executor: &dyn CodeExecutor, rec: &mut RunRecord) {
        let cfg = &self.config;
        let mut docs = Vec::new();
        if cfg.ablation.auto_cot_1 {
            if let Some(r) = &self.retriever {
                match r.retrieve(&problem.description, cfg.retrieval.k) {
                    Ok(found) => {
                        rec.retrieval = Some(found.clone());
                        docs = found;
                    }
                    Err(e) => {
                        record_infra(rec, 1, fail(Stage::Retrieve)(&e), PartialAttempt::default());
                        return;
                    }
                }
            }
        }

        let budget = cfg.attempt_budget();
        let mut prev: Option<(String, Feedback)> = None;
        for i in 1..=budget {
            let mut part = PartialAttempt::default();
            match self.attempt(problem, client, executor, i, &docs, prev.as_ref(), &mut part) {
                Ok(attempt) => {
                    rec.usage += attempt.usage;
                    rec.stop_attempt = i;
                    let next = attempt.feedback_out.clone().map(|fb| {
                        (attempt.candidate.as_ref().map(|c| c.source.clone()).unwrap_or_default(), fb)
                    });
                    rec.attempts.push(attempt);
                    match next {
                        None => {
                            rec.final_status = FinalStatus::Pass;
                            return;
                        }
                        Some(p) => prev = Some(p),
                    }
                }
                Err(f) => {
                    record_infra(rec, i, f, part);
                    return;
                }
            }
        }
        rec.final_status = FinalStatus::Fail;
    }

    #[allow(clippy::too_many_arguments)]
    fn attempt(
        &self,
        problem: &Problem,
        client: &LlmClient,
        executor: &dyn CodeExecutor,
        i: usize,
        docs: &[RetrievedDoc],
        prev: Option<&(String, Feedback)>,
        part: &mut PartialAttempt,
    ) -> Result<AttemptRecord, Failure> {
        let cfg = &self.config;
        let cot_on = if i == 1 { cfg.ablation.auto_cot_1 } else { cfg.ablation.auto_cot_2 };
        if cot_on {
            let p = match prev {
                None => self.prompts.render_initial_cot(problem, docs),
                Some((code, fb)) => self.prompts.render_correction_cot(problem, code, fb),
            }
            .map_err(|e| fail(Stage::Prompt)(&e))?;
            part.cot_prompt = Some(p);
            let c = client
                .complete(Role::Cot, i, part.cot_prompt.as_ref().expect("set above"))
                .map_err(|e| fail(Stage::CotGeneration)(&e))?;
            part.cot_response = Some(c);
        }
        let cot_text = part.cot_response.as_ref().map(|c| c.text.as_str()).unwrap_or("");
        let code_prompt = match prev {
            None => self.prompts.render_initial_code(problem, cot_text),
            Some((code, fb)) => self.prompts.render_correction_code(code, fb, cot_text),
        }
        .map_err(|e| fail(Stage::Prompt)(&e))?;
        part.code_prompt = Some(code_prompt);
        let reply = client
            .complete(Role::Code, i, part.code_prompt.as_ref().expect("set above"))
            .map_err(|e| fail(Stage::CodeGeneration)(&e))?;
        part.candidate = extract_code(&reply.text, i).ok();
        part.code_response = Some(reply);

        let syntax = match &part.candidate {
            None => SyntaxReport::error(NO_CODE_MESSAGE, None, None),
            Some(c) => executor.check_syntax(&c.source).map_err(|e| fail(Stage::SyntaxCheck)(&e))?,
        };
        part.syntax = Some(syntax.clone());
        if syntax.ok {
            let source = part.candidate.as_ref().expect("syntax ok implies a candidate").source.clone();
            let result = run(executor, problem, &source, &cfg.limits, part)?;
            part.execution = Some(result);
        }
        let feedback_out = match &part.execution {
            None => Feedback::from_syntax(&syntax),
            Some(r) => Feedback::from_execution(r),
        };
        let usage = part.cot_response.as_ref().map(|c| c.usage).unwrap_or_default()
            + part.code_response.as_ref().map(|c| c.usage).unwrap_or_default();
        let part = std::mem::take(part);
        Ok(AttemptRecord {
            attempt_index: i,
            cot_prompt: part.cot_prompt,
            cot_response: part.cot_response,
            code_prompt: part.code_prompt.expect("set above"),
            code_response: part.code_response,
            candidate: part.candidate,
            syntax,
            execution: part.execution,
            env_error: part.env_error,
            feedback_out,
            usage,
        })
    }
}

/// Execute once; on an environment fault rebuild the environment and try
/// exactly once more.
fn run(
    executor: &dyn CodeExecutor,
    problem: &Problem,
    source: &str,
    limits: &ExecLimits,
    part: &mut PartialAttempt,
) -> Result<ExecutionResult, Failure> {
    let first = executor.execute(problem, source, limits).map_err(|e| fail(Stage::Execution)(&e))?;
    if first.status != ExecStatus::EnvError {
        return Ok(first);
    }
    part.env_error = Some(first);
    executor.reset().map_err(|e| fail(Stage::EnvironmentReset)(&e))?;
    let second = executor.execute(problem, source, limits).map_err(|e| fail(Stage::Execution)(&e))?;
    if second.status == ExecStatus::EnvError {
        part.execution = Some(second);
        return Err(Failure { stage: Stage::Execution, message: "environment error persisted after reset".into() });
    }
    Ok(second)
}

fn record_infra(rec: &mut RunRecord, attempt: usize, f: Failure, partial: PartialAttempt) {
    let usage = partial.cot_response.as_ref().map(|c| c.usage).unwrap_or_default()
        + partial.code_response.as_ref().map(|c| c.usage).unwrap_or_default();
    rec.usage += usage;
    rec.stop_attempt = attempt;
    rec.final_status = FinalStatus::InfraFail;
    rec.infra_failure = Some(InfraFailure { attempt, stage: f.stage, message: f.message, partial, usage });
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReplayError {
    #[error("attempt {attempt} has no cached {what} response; the record cannot be replayed")]
    Unreplayable { attempt: usize, what: &'static str },
    #[error("replay diverged at attempt {attempt}: `{field}` differs")]
    Divergence { attempt: usize, field: String },
    #[error("replay setup: {0}")]
    Setup(String),
}

enum ExecEvent {
    Check(SyntaxReport),
    CheckErr(String),
    Exec(ExecutionResult),
    ExecErr(String),
    Reset,
    ResetErr(String),
}

struct ReplayBackend {
    queue: Mutex<VecDeque<Result<Completion, LlmError>>>,
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, _prompt: &RenderedPrompt, _cfg: &SamplingConfig) -> Result<Completion, LlmError> {
        self.queue
            .lock()
            .expect("replay lock")
            .pop_front()
            .unwrap_or_else(|| Err(LlmError::Replayed("replay: no cached response left".into())))
    }
}

struct ReplayLlm {
    backend: Mutex<Option<ReplayBackend>>,
    setup_error: Option<String>,
}

impl BackendFactory for ReplayLlm {
    fn for_problem(&self, _problem_id: &str) -> Result<Box<dyn ChatBackend>, LlmError> {
        if let Some(m) = &self.setup_error {
            return Err(LlmError::Replayed(m.clone()));
        }
        let b = self.backend.lock().expect("replay lock").take();
        b.map(|b| Box::new(b) as Box<dyn ChatBackend>)
            .ok_or_else(|| LlmError::Replayed("replay backend already used".into()))
    }
}

struct ReplayExecutor {
    events: Mutex<VecDeque<ExecEvent>>,
}

impl ReplayExecutor {
    fn next(&self) -> Option<ExecEvent> {
        self.events.lock().expect("replay lock").pop_front()
    }
}

fn out_of_order(op: &str) -> ExecError {
    ExecError::Replayed(format!("replay: unexpected {op}"))
}

impl CodeExecutor for ReplayExecutor {
    fn check_syntax(&self, _code: &str) -> Result<SyntaxReport, ExecError> {
        match self.next() {
            Some(ExecEvent::Check(r)) => Ok(r),
            Some(ExecEvent::CheckErr(m)) => Err(ExecError::Replayed(m)),
            _ => Err(out_of_order("syntax check")),
        }
    }

    fn execute(&self, _problem: &Problem, _code: &str, _limits: &ExecLimits) -> Result<ExecutionResult, ExecError> {
        match self.next() {
            Some(ExecEvent::Exec(r)) => Ok(r),
            Some(ExecEvent::ExecErr(m)) => Err(ExecError::Replayed(m)),
            _ => Err(out_of_order("execution")),
        }
    }

    fn reset(&self) -> Result<(), ExecError> {
        match self.next() {
            Some(ExecEvent::Reset) => Ok(()),
            Some(ExecEvent::ResetErr(m)) => Err(ExecError::Replayed(m)),
            _ => Err(out_of_order("reset")),
        }
    }
}

struct ReplayExec {
    executor: Mutex<Option<ReplayExecutor>>,
    setup_error: Option<String>,
}

impl ExecutorFactory for ReplayExec {
    fn for_problem(&self, _problem_id: &str) -> Result<Box<dyn CodeExecutor>, ExecError> {
        if let Some(m) = &self.setup_error {
            return Err(ExecError::Replayed(m.clone()));
        }
        let x = self.executor.lock().expect("replay lock").take();
        x.map(|x| Box::new(x) as Box<dyn CodeExecutor>)
            .ok_or_else(|| ExecError::Replayed("replay executor already used".into()))
    }
}

struct ReplayRetriever(Result<Vec<RetrievedDoc>, String>);

impl Retriever for ReplayRetriever {
    fn retrieve(&self, _query: &str, _k: usize) -> Result<Vec<RetrievedDoc>, KbError> {
        self.0.clone().map_err(KbError::Replayed)
    }
}

fn exec_events(a_syntax: Option<&SyntaxReport>, env: Option<&ExecutionResult>, exec: Option<&ExecutionResult>, out: &mut VecDeque<ExecEvent>) {
    if let Some(s) = a_syntax {
        out.push_back(ExecEvent::Check(s.clone()));
    }
    if let Some(e) = env {
        out.push_back(ExecEvent::Exec(e.clone()));
        out.push_back(ExecEvent::Reset);
    }
    if let Some(x) = exec {
        out.push_back(ExecEvent::Exec(x.clone()));
    }
}

/// Re-run a record from its config snapshot and cached responses, and
/// check the result is identical.
pub fn replay(record: &RunRecord) -> Result<RunRecord, ReplayError> {
    let mut llm = VecDeque::new();
    let mut events = VecDeque::new();
    for a in &record.attempts {
        let n = a.attempt_index;
        if a.cot_prompt.is_some() {
            let c = a.cot_response.clone().ok_or(ReplayError::Unreplayable { attempt: n, what: "CoT" })?;
            llm.push_back(Ok(c));
        }
        let c = a.code_response.clone().ok_or(ReplayError::Unreplayable { attempt: n, what: "code" })?;
        llm.push_back(Ok(c));
        // a reply without code never reached the checker
        let checked = a.candidate.as_ref().map(|_| &a.syntax);
        exec_events(checked, a.env_error.as_ref(), a.execution.as_ref(), &mut events);
    }

    let mut llm_setup = None;
    let mut exec_setup = None;
    let mut retrieval = record.retrieval.clone().map(Ok);
    if let Some(f) = &record.infra_failure {
        let p = &f.partial;
        let n = f.attempt;
        if p.cot_prompt.is_some() && f.stage != Stage::CotGeneration {
            let c = p.cot_response.clone().ok_or(ReplayError::Unreplayable { attempt: n, what: "CoT" })?;
            llm.push_back(Ok(c));
        }
        if p.code_prompt.is_some() && f.stage != Stage::CodeGeneration {
            let c = p.code_response.clone().ok_or(ReplayError::Unreplayable { attempt: n, what: "code" })?;
            llm.push_back(Ok(c));
        }
        let checked = if p.candidate.is_some() { p.syntax.as_ref() } else { None };
        let message = f.message.clone();
        match f.stage {
            Stage::LlmSetup => llm_setup = Some(message),
            Stage::ExecutorSetup => exec_setup = Some(message),
            Stage::Retrieve => retrieval = Some(Err(message)),
            Stage::Prompt => {}
            Stage::CotGeneration | Stage::CodeGeneration => llm.push_back(Err(LlmError::Replayed(message))),
            Stage::SyntaxCheck => events.push_back(ExecEvent::CheckErr(message)),
            Stage::EnvironmentReset => {
                exec_events(checked, None, p.env_error.as_ref(), &mut events);
                events.push_back(ExecEvent::ResetErr(message));
            }
            Stage::Execution => match (&p.env_error, &p.execution) {
                // persisted environment fault: both results recorded
                (Some(_), Some(_)) => exec_events(checked, p.env_error.as_ref(), p.execution.as_ref(), &mut events),
                (env, None) => {
                    exec_events(checked, env.as_ref(), None, &mut events);
                    events.push_back(ExecEvent::ExecErr(message));
                }
                (None, Some(_)) => return Err(ReplayError::Setup("execution infra failure without an env error".into())),
            },
        }
    }

    let cfg = record.config_snapshot.clone();
    let tokenizer = tokenize::by_name(&cfg.kb.tokenizer)
        .ok_or_else(|| ReplayError::Setup(format!("unknown tokenizer `{}`", cfg.kb.tokenizer)))?;
    let prompts = PromptBuilder::from_config(cfg.prompt.clone(), tokenizer).map_err(|e| ReplayError::Setup(e.to_string()))?;
    let registry = BackendRegistry::single(Arc::new(ReplayLlm {
        backend: Mutex::new(Some(ReplayBackend { queue: Mutex::new(llm) })),
        setup_error: llm_setup,
    }));
    let executors = Arc::new(ReplayExec {
        executor: Mutex::new(Some(ReplayExecutor { events: Mutex::new(events) })),
        setup_error: exec_setup,
    });
    let mut engine = Engine::new(cfg, prompts, registry, executors);
    if let Some(r) = retrieval {
        engine = engine.with_retriever(Arc::new(ReplayRetriever(r)));
    }
    let again = engine.solve(&record.problem);
    compare(record, &again)?;
    Ok(again)
}

fn first_diff(a: &Value, b: &Value) -> Option<String> {
    if a == b {
        return None;
    }
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find(|k| x.get(*k) != y.get(*k)).cloned()
        }
        _ => Some(String::new()),
    }
}

fn compare(want: &RunRecord, got: &RunRecord) -> Result<(), ReplayError> {
    let diverge = |attempt: usize, field: &str| Err(ReplayError::Divergence { attempt, field: field.into() });
    if want.retrieval != got.retrieval {
        return diverge(1, "retrieval");
    }
    let n = want.attempts.len().max(got.attempts.len());
    for i in 0..n {
        match (want.attempts.get(i), got.attempts.get(i)) {
            (Some(a), Some(b)) if a == b => {}
            (Some(a), Some(b)) => {
                let va = serde_json::to_value(a).expect("record serializes");
                let vb = serde_json::to_value(b).expect("record serializes");
                return diverge(i + 1, &first_diff(&va, &vb).unwrap_or_else(|| "attempt".into()));
            }
            _ => return diverge(i + 1, "attempts"),
        }
    }
    if want.infra_failure != got.infra_failure {
        return diverge(want.stop_attempt.min(got.stop_attempt), "infra_failure");
    }
    let va = serde_json::to_value(want).expect("record serializes");
    let vb = serde_json::to_value(got).expect("record serializes");
    if let Some(field) = first_diff(&va, &vb) {
        return diverge(want.stop_attempt, &field);
    }
    Ok(())
}
