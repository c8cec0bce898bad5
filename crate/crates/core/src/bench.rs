//! Benchmark harness: problem loading, the solver fleet, pass@n,
//! cumulative-stop and token statistics, and report export.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::TokenUsage;
use crate::problem::{Evaluation, Library, Problem, ProblemType, SOLUTION_VARIABLE};
use crate::refine::{Engine, FinalStatus, RunRecord};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("no problems left after validation and filtering ({rejected} rejected)")]
    NoProblems { rejected: usize },
    #[error("no records to report on")]
    NoRecords,
    #[error("records mix attempt budgets {0} and {1}")]
    MixedBudgets(usize, usize),
    #[error("record `{0}` has an incomplete token ledger")]
    IncompleteLedger(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProblemFilter {
    /// `None` keeps every library.
    pub libraries: Option<Vec<Library>>,
    /// `None` keeps every type.
    pub problem_type: Option<ProblemType>,
}

impl Default for ProblemFilter {
    fn default() -> Self {
        Self { libraries: None, problem_type: Some(ProblemType::Completion) }
    }
}

impl ProblemFilter {
    pub fn libraries(libs: impl IntoIterator<Item = Library>) -> Self {
        Self { libraries: Some(libs.into_iter().collect()), ..Default::default() }
    }

    fn keeps(&self, p: &Problem) -> bool {
        self.libraries.as_ref().is_none_or(|l| l.contains(&p.library))
            && self.problem_type.is_none_or(|t| t == p.problem_type)
    }
}

/// A problem excluded during loading.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejected {
    /// `file:line` or the problem id.
    pub location: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedProblems {
    /// Sorted by id.
    pub problems: Vec<Problem>,
    pub rejected: Vec<Rejected>,
    /// Valid problems dropped by the filter.
    pub filtered_out: usize,
}

/// One line of the published DS-1000 jsonl release.
#[derive(Deserialize)]
struct Ds1000Line {
    prompt: String,
    #[serde(default)]
    reference_code: Option<String>,
    code_context: String,
    metadata: Ds1000Meta,
}

#[derive(Deserialize)]
struct Ds1000Meta {
    problem_id: u64,
    library: String,
}

fn exec_context_re() -> &'static [Regex; 2] {
    static RE: OnceLock<[Regex; 2]> = OnceLock::new();
    RE.get_or_init(|| {
        [
            Regex::new(r#"(?s)exec_context\s*=\s*r?"""(.*?)""""#).expect("static regex"),
            Regex::new(r"(?s)exec_context\s*=\s*r?'''(.*?)'''").expect("static regex"),
        ]
    })
}

/// The DS-1000 harness splices the candidate into its `exec_context`
/// template and runs it against generated inputs inside
/// `test_execution(solution)`. The scaffold shown to the model is that
/// template; the test suite is the whole harness plus the call.
fn from_ds1000(line: Ds1000Line) -> Result<Problem, String> {
    let library: Library = line.metadata.library.parse().map_err(|e: crate::problem::UnknownLibrary| e.to_string())?;
    let scaffold = exec_context_re()
        .iter()
        .find_map(|re| re.captures(&line.code_context))
        .map(|c| c[1].trim_matches('\n').to_string())
        .ok_or("code_context has no exec_context template")?;
    Ok(Problem {
        id: format!("ds1000-{:04}", line.metadata.problem_id),
        library,
        description: line.prompt,
        code_context: scaffold,
        test_suite: format!("{}\n\ntest_execution({SOLUTION_VARIABLE})\n", line.code_context.trim_end()),
        problem_type: ProblemType::Completion,
        reference_solution: line.reference_code,
        evaluation: Evaluation::SolutionString,
    })
}

fn validate(p: &Problem) -> Result<(), String> {
    if p.id.trim().is_empty() {
        return Err("empty id".into());
    }
    let marks = p.marker_lines().len();
    if marks != 1 {
        return Err(format!("expected one `[insert]` line in code_context, found {marks}"));
    }
    if p.test_suite.trim().is_empty() {
        return Err("empty test suite".into());
    }
    Ok(())
}

fn parse_file(path: &Path, out: &mut Vec<(String, Result<Problem, String>)>) -> Result<(), BenchError> {
    let name = path.display().to_string();
    let is_jsonl = path.extension().is_some_and(|e| e == "jsonl");
    if is_jsonl {
        let f = fs::File::open(path).map_err(io_err(path))?;
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let loc = format!("{name}:{}", i + 1);
            let parsed = match serde_json::from_str::<serde_json::Value>(&line) {
                Err(e) => Err(e.to_string()),
                Ok(v) if v.get("metadata").is_some() => {
                    serde_json::from_value::<Ds1000Line>(v).map_err(|e| e.to_string()).and_then(from_ds1000)
                }
                Ok(v) => serde_json::from_value::<Problem>(v).map_err(|e| e.to_string()),
            };
            out.push((loc, parsed));
        }
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| BenchError::Parse { path: path.into(), message: e.to_string() })?;
    let items = match value {
        serde_json::Value::Array(items) => items,
        serde_json::Value::Object(mut m) if m.get("problems").is_some_and(|p| p.is_array()) => {
            match m.remove("problems") {
                Some(serde_json::Value::Array(items)) => items,
                _ => unreachable!("checked above"),
            }
        }
        _ => {
            return Err(BenchError::Parse {
                path: path.into(),
                message: "expected a list of problems or {\"problems\": [...]}".into(),
            })
        }
    };
    for (i, v) in items.into_iter().enumerate() {
        out.push((format!("{name}[{i}]"), serde_json::from_value::<Problem>(v).map_err(|e| e.to_string())));
    }
    Ok(())
}

/// Read problems from a native JSON file (a list, or `{"problems": [..]}`),
/// a jsonl file of native problems or DS-1000 release lines, or a
/// directory of such files. Malformed problems are reported and skipped.
pub fn load_problems(path: impl AsRef<Path>, filter: &ProblemFilter) -> Result<LoadedProblems, BenchError> {
    let path = path.as_ref();
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in fs::read_dir(path).map_err(io_err(path))? {
            let p = entry.map_err(io_err(path))?.path();
            if p.extension().is_some_and(|e| e == "json" || e == "jsonl") {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    let mut parsed = Vec::new();
    for f in &files {
        parse_file(f, &mut parsed)?;
    }

    let mut out = LoadedProblems::default();
    let mut seen = HashSet::new();
    for (location, p) in parsed {
        let p = match p.and_then(|p| validate(&p).map(|_| p)) {
            Ok(p) => p,
            Err(reason) => {
                out.rejected.push(Rejected { location, reason });
                continue;
            }
        };
        if !seen.insert(p.id.clone()) {
            out.rejected.push(Rejected { location, reason: format!("duplicate id `{}`", p.id) });
            continue;
        }
        if filter.keeps(&p) {
            out.problems.push(p);
        } else {
            out.filtered_out += 1;
        }
    }
    if out.problems.is_empty() {
        return Err(BenchError::NoProblems { rejected: out.rejected.len() });
    }
    out.problems.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Solve every problem on a pool of `workers` threads. Output order
/// matches input order whatever the pool size.
pub fn run_benchmark(engine: &Engine, problems: &[Problem], workers: usize) -> Result<Vec<RunRecord>, BenchError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| BenchError::Pool(e.to_string()))?;
    Ok(pool.install(|| problems.par_iter().map(|p| engine.solve(p)).collect()))
}

/// Fraction of records that passed within `n` attempts. Infra failures
/// count as non-pass.
pub fn pass_at_n(records: &[RunRecord], n: usize) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records.iter().filter(|r| r.final_status == FinalStatus::Pass && r.stop_attempt <= n).count();
    hits as f64 / records.len() as f64
}

/// Count-weighted mean of per-group rates.
pub fn weighted_overall(groups: impl IntoIterator<Item = (usize, f64)>) -> f64 {
    let (num, den) = groups.into_iter().fold((0.0, 0usize), |(num, den), (c, p)| (num + c as f64 * p, den + c));
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}

/// The attempt budget shared by all records.
pub fn common_budget(records: &[RunRecord]) -> Result<usize, BenchError> {
    let first = records.first().ok_or(BenchError::NoRecords)?.config_snapshot.attempt_budget();
    for r in records {
        let b = r.config_snapshot.attempt_budget();
        if b != first {
            return Err(BenchError::MixedBudgets(first, b));
        }
    }
    Ok(first)
}

/// Number of records that stopped (pass, fail or infra) at or before each
/// attempt, for attempts `1..=budget`.
pub fn cumulative_stop_counts(records: &[RunRecord]) -> Result<BTreeMap<usize, usize>, BenchError> {
    let budget = common_budget(records)?;
    let mut at = vec![0usize; budget + 1];
    for r in records {
        at[r.stop_attempt.min(budget)] += 1;
    }
    let mut running = 0;
    Ok((1..=budget)
        .map(|a| {
            running += at[a];
            (a, running)
        })
        .collect())
}

fn ledger_total(r: &RunRecord) -> Result<TokenUsage, BenchError> {
    let ledger: TokenUsage = r.ledger.iter().map(|e| e.usage).sum();
    if ledger != r.usage || prefix_usage(r, usize::MAX) != r.usage {
        return Err(BenchError::IncompleteLedger(r.problem_id.clone()));
    }
    Ok(r.usage)
}

/// Summed usage per attempt budget, one record set per budget.
pub fn token_report(by_budget: &BTreeMap<usize, Vec<RunRecord>>) -> Result<BTreeMap<usize, TokenUsage>, BenchError> {
    by_budget
        .iter()
        .map(|(n, recs)| Ok((*n, recs.iter().map(ledger_total).sum::<Result<TokenUsage, _>>()?)))
        .collect()
}

/// Usage a run would have spent under a smaller budget `n`: the loop is
/// prefix-stable, so that is the usage of its first `n` attempts.
pub fn prefix_usage(r: &RunRecord, n: usize) -> TokenUsage {
    let attempts: TokenUsage = r.attempts.iter().filter(|a| a.attempt_index <= n).map(|a| a.usage).sum();
    let infra = r.infra_failure.as_ref().filter(|f| f.attempt <= n).map(|f| f.usage).unwrap_or_default();
    attempts + infra
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryStats {
    pub count: usize,
    pub pass_at_n: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_max: usize,
    pub problems: usize,
    pub per_library: BTreeMap<Library, LibraryStats>,
    /// Count-weighted over `per_library`.
    pub overall: BTreeMap<usize, f64>,
    pub cumulative_stop: BTreeMap<usize, usize>,
    /// Usage within each attempt budget `n <= n_max`.
    pub tokens: BTreeMap<usize, TokenUsage>,
    pub infra_failures: usize,
    pub infra_failed: Vec<String>,
}

impl BenchReport {
    pub fn from_records(records: &[RunRecord]) -> Result<Self, BenchError> {
        let n_max = common_budget(records)?;
        let mut by_lib: BTreeMap<Library, Vec<&RunRecord>> = BTreeMap::new();
        for r in records {
            ledger_total(r)?;
            by_lib.entry(r.library).or_default().push(r);
        }
        let per_library: BTreeMap<Library, LibraryStats> = by_lib
            .into_iter()
            .map(|(lib, recs)| {
                let count = recs.len();
                let pass = (1..=n_max)
                    .map(|n| {
                        let hits = recs.iter().filter(|r| r.passed() && r.stop_attempt <= n).count();
                        (n, hits as f64 / count as f64)
                    })
                    .collect();
                (lib, LibraryStats { count, pass_at_n: pass })
            })
            .collect();
        let overall = (1..=n_max)
            .map(|n| (n, weighted_overall(per_library.values().map(|s| (s.count, s.pass_at_n[&n])))))
            .collect();
        let tokens = (1..=n_max).map(|n| (n, records.iter().map(|r| prefix_usage(r, n)).sum())).collect();
        let mut infra_failed: Vec<String> = records
            .iter()
            .filter(|r| r.final_status == FinalStatus::InfraFail)
            .map(|r| r.problem_id.clone())
            .collect();
        infra_failed.sort();
        Ok(Self {
            n_max,
            problems: records.len(),
            per_library,
            overall,
            cumulative_stop: cumulative_stop_counts(records)?,
            tokens,
            infra_failures: infra_failed.len(),
            infra_failed,
        })
    }

    /// Human-readable table: libraries as columns, Overall last, one
    /// decimal place.
    pub fn render_text(&self) -> String {
        let libs: Vec<Library> = Library::ALL.iter().copied().filter(|l| self.per_library.contains_key(l)).collect();
        let mut header = format!("{:<8}", "n");
        for l in &libs {
            let _ = write!(header, "{:>12}", l.as_str());
        }
        let _ = write!(header, "{:>12}", "Overall");
        let mut out = String::new();
        let _ = writeln!(out, "pass@n (%), {} problems", self.problems);
        let _ = writeln!(out, "{header}");
        let mut counts = format!("{:<8}", "count");
        for l in &libs {
            let _ = write!(counts, "{:>12}", self.per_library[l].count);
        }
        let _ = writeln!(out, "{counts}{:>12}", self.problems);
        for n in 1..=self.n_max {
            let mut row = format!("{:<8}", n);
            for l in &libs {
                let _ = write!(row, "{:>12.1}", 100.0 * self.per_library[l].pass_at_n[&n]);
            }
            let _ = writeln!(out, "{row}{:>12.1}", 100.0 * self.overall[&n]);
        }
        let _ = writeln!(out, "\ncumulative stops");
        for (a, c) in &self.cumulative_stop {
            let _ = writeln!(out, "{:<8}{:>12}", a, c);
        }
        let _ = writeln!(out, "\ntokens{:>14}{:>14}", "prompt", "completion");
        for (n, u) in &self.tokens {
            let _ = writeln!(out, "{:<6}{:>14}{:>14}", n, u.prompt_tokens, u.completion_tokens);
        }
        let _ = writeln!(
            out,
            "\ninfra failures: {} (counted as non-pass){}",
            self.infra_failures,
            if self.infra_failed.is_empty() { String::new() } else { format!(": {}", self.infra_failed.join(", ")) }
        );
        out
    }

    fn pass_csv(&self) -> String {
        let mut out = String::from("n");
        for l in Library::ALL {
            out.push(',');
            out.push_str(l.as_str());
        }
        out.push_str(",Overall\n");
        for n in 1..=self.n_max {
            let _ = write!(out, "{n}");
            for l in Library::ALL {
                out.push(',');
                if let Some(s) = self.per_library.get(&l) {
                    let _ = write!(out, "{}", 100.0 * s.pass_at_n[&n]);
                }
            }
            let _ = writeln!(out, ",{}", 100.0 * self.overall[&n]);
        }
        out
    }
}

pub const REPORT_FILES: [&str; 5] = ["report.json", "pass_at_n.csv", "cumulative.csv", "tokens.csv", "report.txt"];

fn write_file(path: &Path, contents: &str) -> Result<(), BenchError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Write the report files into `dir`, creating it. Returns their paths.
pub fn export_report(report: &BenchReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, BenchError> {
    if report.problems == 0 {
        return Err(BenchError::NoRecords);
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    let mut cumulative = String::from("attempt,count\n");
    for (a, c) in &report.cumulative_stop {
        let _ = writeln!(cumulative, "{a},{c}");
    }
    let mut tokens = String::from("n,prompt_tokens,completion_tokens\n");
    for (n, u) in &report.tokens {
        let _ = writeln!(tokens, "{n},{},{}", u.prompt_tokens, u.completion_tokens);
    }
    let contents = [json, report.pass_csv(), cumulative, tokens, report.render_text()];
    let mut paths = Vec::new();
    for (name, body) in REPORT_FILES.iter().zip(contents) {
        let p = dir.join(name);
        write_file(&p, &body)?;
        paths.push(p);
    }
    Ok(paths)
}

/// One JSON record per line.
pub fn write_records(records: &[RunRecord], path: impl AsRef<Path>) -> Result<(), BenchError> {
    let path = path.as_ref();
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| BenchError::Parse { path: path.into(), message: e.to_string() })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<RunRecord>, BenchError> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| BenchError::Parse {
            path: path.into(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}
