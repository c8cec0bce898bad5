//! Syntax checking, program assembly and test execution.

mod mock;
mod shim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::{Evaluation, Problem, INSERT_MARKER, SOLUTION_VARIABLE};

pub use mock::{fingerprint, MissPolicy, MockExecutor, MockOutcome};
pub use shim::{manifest_id, PythonSyntaxChecker, RunnerJob, RunnerResult, ShimExecutor, BUILTIN_MANIFEST};

pub const OUTPUT_CAP_BYTES: usize = 32 * 1024;
pub const TRACEBACK_CAP_BYTES: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("problem `{id}` is malformed: {reason}")]
    Malformed { id: String, reason: String },
    #[error("toolchain unavailable: {0}")]
    Toolchain(String),
    #[error("executor io: {0}")]
    Io(#[from] std::io::Error),
    /// A failure reproduced from a recorded run.
    #[error("{0}")]
    Replayed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SyntaxReport {
    pub ok: bool,
    pub message: String,
    pub line: Option<u32>,
    pub column: Option<u32>,
}

impl SyntaxReport {
    pub fn ok() -> Self {
        Self { ok: true, ..Default::default() }
    }

    pub fn error(message: impl Into<String>, line: Option<u32>, column: Option<u32>) -> Self {
        let mut message = message.into();
        if message.trim().is_empty() {
            message = "SyntaxError: invalid syntax".into();
        }
        Self { ok: false, message, line, column }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Pass,
    TestFailure,
    RuntimeError,
    SyntaxError,
    Timeout,
    EnvError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestVerdict {
    Pass,
    Fail,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecStatus,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
    #[serde(default)]
    pub traceback: String,
    #[serde(default)]
    pub per_test: Vec<(String, TestVerdict)>,
    #[serde(default)]
    pub wall_time_s: f64,
}

impl ExecutionResult {
    pub fn pass() -> Self {
        Self::with_status(ExecStatus::Pass, "")
    }

    pub fn with_status(status: ExecStatus, traceback: impl Into<String>) -> Self {
        let per_test = match status {
            ExecStatus::Pass => vec![("0".to_string(), TestVerdict::Pass)],
            ExecStatus::TestFailure => vec![("0".to_string(), TestVerdict::Fail)],
            _ => Vec::new(),
        };
        Self {
            status,
            stdout: String::new(),
            stderr: String::new(),
            traceback: traceback.into(),
            per_test,
            wall_time_s: 0.0,
        }
    }

    /// Apply the output caps: head and tail of stdout/stderr, tail of the
    /// traceback.
    pub fn capped(mut self) -> Self {
        self.stdout = cap_head_tail(&self.stdout, OUTPUT_CAP_BYTES);
        self.stderr = cap_head_tail(&self.stderr, OUTPUT_CAP_BYTES);
        self.traceback = cap_tail(&self.traceback, TRACEBACK_CAP_BYTES);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    SyntaxChecker,
    CodeExecutor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub source: FeedbackSource,
    pub body: String,
}

impl Feedback {
    /// `None` for a clean report.
    pub fn from_syntax(report: &SyntaxReport) -> Option<Self> {
        if report.ok {
            return None;
        }
        let loc = match (report.line, report.column) {
            (Some(l), Some(c)) => format!(" (line {l}, column {c})"),
            (Some(l), None) => format!(" (line {l})"),
            _ => String::new(),
        };
        Some(Self { source: FeedbackSource::SyntaxChecker, body: format!("{}{loc}", report.message) })
    }

    /// `None` for a passing result.
    pub fn from_execution(result: &ExecutionResult) -> Option<Self> {
        if result.status == ExecStatus::Pass {
            return None;
        }
        let mut body = result.traceback.trim_end().to_string();
        if let Some((id, _)) = result.per_test.iter().find(|(_, v)| *v != TestVerdict::Pass) {
            if !body.is_empty() {
                body.push('\n');
            }
            body.push_str(&format!("Failing test: {id}"));
        }
        if body.is_empty() {
            body = match result.status {
                ExecStatus::Timeout => format!("Execution timed out after {:.1}s", result.wall_time_s),
                ExecStatus::TestFailure => "A test assertion failed.".into(),
                ExecStatus::EnvError => "The execution environment failed.".into(),
                _ => {
                    let tail = cap_tail(result.stderr.trim(), 4096);
                    if tail.is_empty() {
                        format!("Execution ended with status {:?}", result.status)
                    } else {
                        tail
                    }
                }
            };
        }
        Some(Self { source: FeedbackSource::CodeExecutor, body })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecLimits {
    pub timeout_s: f64,
    pub memory_mb: u64,
}

impl Default for ExecLimits {
    fn default() -> Self {
        Self { timeout_s: 120.0, memory_mb: 4096 }
    }
}

pub trait CodeExecutor: Send + Sync {
    /// Compile-only check; never runs the candidate.
    fn check_syntax(&self, code: &str) -> Result<SyntaxReport, ExecError>;
    fn execute(&self, problem: &Problem, code: &str, limits: &ExecLimits) -> Result<ExecutionResult, ExecError>;
    /// Rebuild whatever environment state the executor keeps.
    fn reset(&self) -> Result<(), ExecError> {
        Ok(())
    }
}

/// Hands each problem's solve its own executor, so scripted state never
/// leaks between problems or runs.
pub trait ExecutorFactory: Send + Sync {
    fn for_problem(&self, problem_id: &str) -> Result<Box<dyn CodeExecutor>, ExecError>;
}

impl ExecutorFactory for MockExecutor {
    fn for_problem(&self, _problem_id: &str) -> Result<Box<dyn CodeExecutor>, ExecError> {
        Ok(Box::new(self.clone()))
    }
}

impl ExecutorFactory for ShimExecutor {
    fn for_problem(&self, _problem_id: &str) -> Result<Box<dyn CodeExecutor>, ExecError> {
        Ok(Box::new(self.clone()))
    }
}

/// Python string literal for `s`.
pub fn python_str_literal(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 || c == '\u{7f}' => out.push_str(&format!("\\x{:02x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// The program for one candidate: the code context with its single marker
/// line replaced by `code`, or for [`Evaluation::SolutionString`] problems
/// a binding of the source to [`SOLUTION_VARIABLE`].
pub fn build_program(problem: &Problem, code: &str) -> Result<String, ExecError> {
    let lines: Vec<&str> = problem.code_context.split('\n').collect();
    let marks: Vec<usize> = (0..lines.len()).filter(|&i| lines[i].trim() == INSERT_MARKER).collect();
    if marks.len() != 1 {
        return Err(ExecError::Malformed {
            id: problem.id.clone(),
            reason: format!("expected one `{INSERT_MARKER}` line, found {}", marks.len()),
        });
    }
    if problem.evaluation == Evaluation::SolutionString {
        return Ok(format!("{SOLUTION_VARIABLE} = {}\n", python_str_literal(code)));
    }
    let mut out = String::with_capacity(problem.code_context.len() + code.len());
    for (i, line) in lines.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(if i == marks[0] { code } else { line });
    }
    Ok(out)
}

fn floor_boundary(s: &str, mut i: usize) -> usize {
    while !s.is_char_boundary(i) {
        i -= 1;
    }
    i
}

fn ceil_boundary(s: &str, mut i: usize) -> usize {
    while !s.is_char_boundary(i) {
        i += 1;
    }
    i
}

/// Keep the first and last `cap / 2` bytes.
pub fn cap_head_tail(s: &str, cap: usize) -> String {
    if s.len() <= cap {
        return s.to_string();
    }
    let head = floor_boundary(s, cap / 2);
    let tail = ceil_boundary(s, s.len() - cap / 2);
    format!("{}\n[... {} bytes omitted ...]\n{}", &s[..head], tail - head, &s[tail..])
}

/// Keep the last `cap` bytes.
pub fn cap_tail(s: &str, cap: usize) -> String {
    if s.len() <= cap {
        return s.to_string();
    }
    let start = ceil_boundary(s, s.len() - cap);
    format!("[... {start} bytes omitted ...]\n{}", &s[start..])
}
