//! Host side of the runner-shim protocol: one JSON job on the shim's stdin,
//! one JSON result on its stdout, one process per job.

use std::io::{Read, Write};
use std::os::unix::process::CommandExt;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_program, cap_tail, CodeExecutor, ExecError, ExecLimits, ExecStatus, ExecutionResult, SyntaxReport, TestVerdict};
use crate::problem::Problem;

/// Pinned library set shipped with the crate.
pub const BUILTIN_MANIFEST: &str = include_str!("../../manifests/ds1000.txt");

/// `name-<12 hex digits of the manifest hash>`.
pub fn manifest_id(name: &str, contents: &str) -> String {
    format!("{name}-{}", &hex::encode(Sha256::digest(contents.as_bytes()))[..12])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerJob {
    pub program: String,
    pub tests: String,
    pub timeout_s: f64,
    pub env_manifest_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerResult {
    pub status: ExecStatus,
    pub stdout: String,
    pub stderr: String,
    pub traceback: String,
    pub per_test: Vec<(String, TestVerdict)>,
    pub wall_time_s: f64,
}

const CHECK_SCRIPT: &str = r#"
import json, sys
src = sys.stdin.buffer.read().decode("utf-8", "replace")
try:
    compile(src, "<candidate>", "exec", dont_inherit=True)
    out = {"ok": True, "message": "", "line": None, "column": None}
except SyntaxError as e:
    out = {"ok": False, "message": "%s: %s" % (type(e).__name__, e.msg), "line": e.lineno, "column": e.offset}
except ValueError as e:
    out = {"ok": False, "message": "ValueError: %s" % e, "line": None, "column": None}
sys.stdout.write(json.dumps(out))
"#;

struct Captured {
    status: Option<std::process::ExitStatus>,
    stdout: Vec<u8>,
    stderr: Vec<u8>,
    timed_out: bool,
    elapsed: Duration,
}

/// Spawn `argv` in its own process group, feed `input`, and collect its
/// output. The whole group is killed at `deadline`, and again after a
/// normal exit so no descendant outlives the job.
fn run_captured(argv: &[String], input: Vec<u8>, deadline: Duration, memory_mb: u64) -> std::io::Result<Captured> {
    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..]).stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::piped()).process_group(0);
    if memory_mb > 0 {
        let bytes = memory_mb.saturating_mul(1024 * 1024) as libc::rlim_t;
        // SAFETY: setrlimit is async-signal-safe and touches no parent state.
        unsafe {
            cmd.pre_exec(move || {
                let lim = libc::rlimit { rlim_cur: bytes, rlim_max: bytes };
                if libc::setrlimit(libc::RLIMIT_AS, &lim) != 0 {
                    return Err(std::io::Error::last_os_error());
                }
                Ok(())
            });
        }
    }
    let start = Instant::now();
    let mut child = cmd.spawn()?;
    let pgid = child.id() as libc::pid_t;

    let mut stdin = child.stdin.take().expect("piped stdin");
    let writer = thread::spawn(move || {
        // a shim that exits early closes the pipe; that is not our error
        let _ = stdin.write_all(&input);
    });
    let mut out = child.stdout.take().expect("piped stdout");
    let mut err = child.stderr.take().expect("piped stderr");
    let out_t = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = out.read_to_end(&mut buf);
        buf
    });
    let err_t = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = err.read_to_end(&mut buf);
        buf
    });

    let mut timed_out = false;
    let status = loop {
        if let Some(st) = child.try_wait()? {
            break Some(st);
        }
        if start.elapsed() >= deadline {
            timed_out = true;
            // SAFETY: plain syscall on the group we created.
            unsafe { libc::killpg(pgid, libc::SIGKILL) };
            let _ = child.wait();
            break None;
        }
        thread::sleep(Duration::from_millis(5));
    };
    let elapsed = start.elapsed();
    unsafe { libc::killpg(pgid, libc::SIGKILL) };
    let _ = writer.join();
    let stdout = out_t.join().unwrap_or_default();
    let stderr = err_t.join().unwrap_or_default();
    Ok(Captured { status, stdout, stderr, timed_out, elapsed })
}

/// Compile-only checker backed by a Python interpreter.
#[derive(Debug, Clone)]
pub struct PythonSyntaxChecker {
    python: String,
}

impl PythonSyntaxChecker {
    /// Fails if the interpreter cannot be started.
    pub fn new(python: impl Into<String>) -> Result<Self, ExecError> {
        let python = python.into();
        let ok = Command::new(&python)
            .args(["-c", "import sys; sys.exit(0)"])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map(|s| s.success())
            .unwrap_or(false);
        if !ok {
            return Err(ExecError::Toolchain(format!("`{python}` did not start")));
        }
        Ok(Self { python })
    }

    pub fn check(&self, code: &str) -> Result<SyntaxReport, ExecError> {
        let argv = vec![self.python.clone(), "-I".into(), "-c".into(), CHECK_SCRIPT.into()];
        let cap = run_captured(&argv, code.as_bytes().to_vec(), Duration::from_secs(30), 0)?;
        if cap.timed_out || !cap.status.is_some_and(|s| s.success()) {
            return Err(ExecError::Toolchain(format!(
                "syntax checker failed: {}",
                String::from_utf8_lossy(&cap.stderr).trim()
            )));
        }
        serde_json::from_slice::<SyntaxReport>(&cap.stdout)
            .map(|r| if r.ok { SyntaxReport::ok() } else { SyntaxReport::error(r.message, r.line, r.column) })
            .map_err(|e| ExecError::Toolchain(format!("syntax checker output: {e}")))
    }
}

/// Executor that runs each job through an external shim command.
#[derive(Debug, Clone)]
pub struct ShimExecutor {
    command: Vec<String>,
    manifest_id: String,
    checker: PythonSyntaxChecker,
}

fn env_error(message: String, elapsed: Duration) -> ExecutionResult {
    ExecutionResult {
        wall_time_s: elapsed.as_secs_f64(),
        ..ExecutionResult::with_status(ExecStatus::EnvError, message)
    }
}

impl ShimExecutor {
    pub fn new(command: Vec<String>, manifest_id: impl Into<String>, checker: PythonSyntaxChecker) -> Result<Self, ExecError> {
        if command.is_empty() {
            return Err(ExecError::Toolchain("empty runner command".into()));
        }
        Ok(Self { command, manifest_id: manifest_id.into(), checker })
    }

    pub fn run_job(&self, job: &RunnerJob, limits: &ExecLimits) -> Result<ExecutionResult, ExecError> {
        let input = serde_json::to_vec(job).map_err(std::io::Error::from)?;
        let deadline = Duration::from_secs_f64(limits.timeout_s.max(0.0) * 1.25);
        let cap = match run_captured(&self.command, input, deadline, limits.memory_mb) {
            Ok(c) => c,
            Err(e) => return Ok(env_error(format!("cannot start runner {:?}: {e}", self.command[0]), Duration::ZERO)),
        };
        let stderr = String::from_utf8_lossy(&cap.stderr).into_owned();
        if cap.timed_out {
            return Ok(ExecutionResult {
                status: ExecStatus::Timeout,
                stdout: String::from_utf8_lossy(&cap.stdout).into_owned(),
                stderr,
                traceback: format!("Timeout: execution exceeded {:.1}s", limits.timeout_s),
                per_test: Vec::new(),
                wall_time_s: cap.elapsed.as_secs_f64(),
            }
            .capped());
        }
        let status = cap.status.expect("exited");
        if !status.success() {
            return Ok(env_error(format!("runner exited with {status}: {}", cap_tail(stderr.trim(), 4096)), cap.elapsed));
        }
        let mut docs = serde_json::Deserializer::from_slice(&cap.stdout).into_iter::<RunnerResult>();
        let result = match (docs.next(), docs.next()) {
            (Some(Ok(r)), None) => r,
            (Some(Ok(_)), Some(_)) => {
                return Ok(env_error("runner wrote more than one document".into(), cap.elapsed));
            }
            (Some(Err(e)), _) => return Ok(env_error(format!("runner output is not a result document: {e}"), cap.elapsed)),
            (None, _) => return Ok(env_error("runner wrote no result".into(), cap.elapsed)),
        };
        let all_pass = result.per_test.iter().all(|(_, v)| *v == TestVerdict::Pass);
        if result.status == ExecStatus::Pass && !(all_pass && !result.per_test.is_empty()) {
            return Ok(env_error("runner reported pass with failing or missing tests".into(), cap.elapsed));
        }
        Ok(ExecutionResult {
            status: result.status,
            stdout: result.stdout,
            stderr: result.stderr,
            traceback: result.traceback,
            per_test: result.per_test,
            wall_time_s: result.wall_time_s,
        }
        .capped())
    }
}

impl CodeExecutor for ShimExecutor {
    fn check_syntax(&self, code: &str) -> Result<SyntaxReport, ExecError> {
        self.checker.check(code)
    }

    fn execute(&self, problem: &Problem, code: &str, limits: &ExecLimits) -> Result<ExecutionResult, ExecError> {
        let program = build_program(problem, code)?;
        let job = RunnerJob {
            program,
            tests: problem.test_suite.clone(),
            timeout_s: limits.timeout_s,
            env_manifest_id: self.manifest_id.clone(),
        };
        self.run_job(&job, limits)
    }

    fn reset(&self) -> Result<(), ExecError> {
        // nothing persists between jobs; re-probe the toolchain
        PythonSyntaxChecker::new(self.checker.python.clone()).map(|_| ())
    }
}
