//! Scripted executor keyed by candidate fingerprint.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_program, CodeExecutor, ExecError, ExecLimits, ExecStatus, ExecutionResult, SyntaxReport};
use crate::problem::Problem;

/// Hex SHA-256 of the candidate source.
pub fn fingerprint(code: &str) -> String {
    hex::encode(Sha256::digest(code.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockOutcome {
    /// The syntax check fails with this message.
    Syntax { message: String, line: Option<u32> },
    /// The syntax check passes and execution yields this result.
    Exec(ExecutionResult),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissPolicy {
    /// Unscripted candidates fail their tests.
    #[default]
    Fail,
    Pass,
}

/// Each fingerprint maps to a sequence of outcomes; successive executions
/// of the same candidate within one problem walk the sequence and then
/// repeat its last entry.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct MockExecutor {
    #[serde(default)]
    script: HashMap<String, Vec<MockOutcome>>,
    #[serde(default)]
    miss: MissPolicy,
    #[serde(skip)]
    cursor: Mutex<HashMap<(String, String), usize>>,
}

impl Clone for MockExecutor {
    fn clone(&self) -> Self {
        Self { script: self.script.clone(), miss: self.miss, cursor: Mutex::new(HashMap::new()) }
    }
}

impl MockExecutor {
    pub fn new(miss: MissPolicy) -> Self {
        Self { miss, ..Default::default() }
    }

    pub fn on_fingerprint(mut self, fp: impl Into<String>, outcomes: Vec<MockOutcome>) -> Self {
        assert!(!outcomes.is_empty(), "outcome sequence must be non-empty");
        self.script.insert(fp.into(), outcomes);
        self
    }

    pub fn on_source(self, code: &str, outcome: MockOutcome) -> Self {
        self.on_fingerprint(fingerprint(code), vec![outcome])
    }

    pub fn insert(&mut self, code: &str, outcomes: Vec<MockOutcome>) {
        assert!(!outcomes.is_empty(), "outcome sequence must be non-empty");
        self.script.insert(fingerprint(code), outcomes);
    }

    fn peek(&self, code: &str) -> Option<&MockOutcome> {
        self.script.get(&fingerprint(code)).map(|seq| &seq[0])
    }

    fn miss_result(&self, fp: &str) -> ExecutionResult {
        match self.miss {
            MissPolicy::Pass => ExecutionResult::pass(),
            MissPolicy::Fail => ExecutionResult::with_status(
                ExecStatus::TestFailure,
                format!("AssertionError: no scripted result for candidate {}", &fp[..12]),
            ),
        }
    }
}

impl CodeExecutor for MockExecutor {
    fn check_syntax(&self, code: &str) -> Result<SyntaxReport, ExecError> {
        Ok(match self.peek(code) {
            Some(MockOutcome::Syntax { message, line }) => SyntaxReport::error(message.clone(), *line, None),
            _ => SyntaxReport::ok(),
        })
    }

    fn execute(&self, problem: &Problem, code: &str, _limits: &ExecLimits) -> Result<ExecutionResult, ExecError> {
        build_program(problem, code)?;
        let fp = fingerprint(code);
        let Some(seq) = self.script.get(&fp) else {
            return Ok(self.miss_result(&fp));
        };
        let mut cursor = self.cursor.lock().expect("cursor lock");
        let pos = cursor.entry((problem.id.clone(), fp)).or_insert(0);
        let outcome = &seq[(*pos).min(seq.len() - 1)];
        *pos += 1;
        Ok(match outcome {
            MockOutcome::Exec(r) => r.clone(),
            MockOutcome::Syntax { message, .. } => ExecutionResult::with_status(ExecStatus::SyntaxError, message.clone()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{Library, ProblemType};

    fn problem(id: &str) -> Problem {
        Problem {
            id: id.into(),
            library: Library::SciPy,
            description: String::new(),
            code_context: "[insert]".into(),
            test_suite: String::new(),
            problem_type: ProblemType::Completion,
            reference_solution: None,
            evaluation: Default::default(),
        }
    }

    #[test]
    fn scripted_and_missing() {
        let m = MockExecutor::new(MissPolicy::Fail)
            .on_source("good", MockOutcome::Exec(ExecutionResult::pass()))
            .on_source("bad(", MockOutcome::Syntax { message: "invalid syntax".into(), line: Some(1) });
        let l = ExecLimits::default();
        assert_eq!(m.execute(&problem("a"), "good", &l).unwrap().status, ExecStatus::Pass);
        assert!(!m.check_syntax("bad(").unwrap().ok);
        assert!(m.check_syntax("anything").unwrap().ok);
        let miss = m.execute(&problem("a"), "other", &l).unwrap();
        assert_eq!(miss.status, ExecStatus::TestFailure);
        assert!(!miss.traceback.is_empty());
        let p = MockExecutor::new(MissPolicy::Pass);
        assert_eq!(p.execute(&problem("a"), "x", &l).unwrap().status, ExecStatus::Pass);
    }

    #[test]
    fn sequences_advance_per_problem() {
        let env = ExecutionResult::with_status(ExecStatus::EnvError, "");
        let m = MockExecutor::new(MissPolicy::Fail)
            .on_fingerprint(fingerprint("c"), vec![MockOutcome::Exec(env), MockOutcome::Exec(ExecutionResult::pass())]);
        let l = ExecLimits::default();
        assert_eq!(m.execute(&problem("a"), "c", &l).unwrap().status, ExecStatus::EnvError);
        assert_eq!(m.execute(&problem("b"), "c", &l).unwrap().status, ExecStatus::EnvError);
        assert_eq!(m.execute(&problem("a"), "c", &l).unwrap().status, ExecStatus::Pass);
        assert_eq!(m.execute(&problem("a"), "c", &l).unwrap().status, ExecStatus::Pass);
    }

    #[test]
    fn script_json_round_trip() {
        let m = MockExecutor::new(MissPolicy::Pass).on_source("x", MockOutcome::Exec(ExecutionResult::pass()));
        let s = serde_json::to_string(&m).unwrap();
        let back: MockExecutor = serde_json::from_str(&s).unwrap();
        assert_eq!(back.script, m.script);
        assert_eq!(back.miss, MissPolicy::Pass);
    }
}
