//! `dsrefine` command line. Exit codes: 0 success, 1 user error (bad flags,
//! config or input files), 2 infrastructure error (toolchain, backends,
//! infra-failed problems).

use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dsrefine_core::bench::{self, ProblemFilter};
use dsrefine_core::config::{resolve_config, ConfigSources, Resolved};
use dsrefine_core::ingest::{compose_documents, read_documents, write_documents, DumpReader};
use dsrefine_core::kb::{KnowledgeBase, Retriever};
use dsrefine_core::problem::{Library, Problem};
use dsrefine_core::refine::{replay, FinalStatus};
use dsrefine_core::{setup, tokenize, BenchReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INFRA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dsrefine", version, about = "Self-correcting data-science code generation", propagate_version = true)]
pub struct Cli {
    /// JSON config file (lowest precedence after built-in defaults)
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override any config key; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Knowledge-base tools
    #[command(subcommand)]
    Kb(KbCommand),
    /// Solve one problem and print its run record
    Solve(SolveArgs),
    /// Run a problem set and write report files
    Bench(BenchArgs),
    /// Rebuild report files from saved run records
    Report(ReportArgs),
    /// Re-run a saved record from its cached responses and check it matches
    Replay(ReplayArgs),
    /// Print the effective configuration
    Config(ConfigArgs),
}

#[derive(Debug, Subcommand)]
pub enum KbCommand {
    /// Turn a posts/comments dump into knowledge documents (NDJSON)
    Build(KbBuildArgs),
    /// Embed documents and write a vector index
    Index(KbIndexArgs),
    /// Query an index
    Query(KbQueryArgs),
}

#[derive(Debug, Args)]
pub struct KbBuildArgs {
    /// Posts.xml from the dump
    #[arg(long, value_name = "PATH")]
    pub posts: PathBuf,
    /// Comments.xml from the dump
    #[arg(long, value_name = "PATH")]
    pub comments: PathBuf,
    /// Output NDJSON file
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Token budget per document (exclusive)
    #[arg(long)]
    pub budget: Option<usize>,
    /// Minimum comments per document
    #[arg(long)]
    pub min_comments: Option<usize>,
}

#[derive(Debug, Args)]
pub struct KbIndexArgs {
    /// NDJSON documents from `kb build`
    #[arg(long, value_name = "PATH")]
    pub docs: PathBuf,
    /// Output index file
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct KbQueryArgs {
    /// Index file from `kb index`
    #[arg(long, value_name = "PATH")]
    pub index: PathBuf,
    /// Query text
    #[arg(long)]
    pub text: String,
    /// Number of documents to return
    #[arg(short = 'k', default_value_t = 3)]
    pub k: usize,
    /// Document file, overriding the one recorded in the index
    #[arg(long, value_name = "PATH")]
    pub docs: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExecutorArg {
    Real,
    Mock,
}

/// Flags shared by `solve` and `bench`.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// Attempt budget
    #[arg(long, value_name = "N")]
    pub n: Option<usize>,
    /// Disable the retrieval-grounded CoT generator on attempt 1
    #[arg(long)]
    pub no_cot1: bool,
    /// Disable the feedback-driven CoT generator on later attempts
    #[arg(long)]
    pub no_cot2: bool,
    /// Per-attempt execution timeout in seconds
    #[arg(long, value_name = "SECONDS")]
    pub timeout: Option<f64>,
    /// Execution backend
    #[arg(long, value_enum)]
    pub executor: Option<ExecutorArg>,
    /// Knowledge-base index used for retrieval
    #[arg(long, value_name = "PATH")]
    pub index: Option<PathBuf>,
    /// Mock LLM transcript file
    #[arg(long, value_name = "PATH")]
    pub transcripts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Problem id (looked up in the dataset) or a problem file
    #[arg(long, value_name = "ID|FILE")]
    pub problem: String,
    /// Dataset to look the problem id up in
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    /// Write the run record here instead of stdout
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Problem file or directory
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    /// Comma-separated libraries to keep, e.g. scipy,torch
    #[arg(long, value_delimiter = ',', value_name = "LIBS")]
    pub libraries: Vec<String>,
    /// Worker threads
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory for report files and run records
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// records.jsonl written by `bench`
    #[arg(long, value_name = "PATH")]
    pub records: PathBuf,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Run record JSON written by `solve`
    #[arg(long, value_name = "PATH")]
    pub record: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Also list which layer set each non-default key
    #[arg(long)]
    pub origins: bool,
}

/// An error plus the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

trait Classify<T> {
    fn user(self) -> Result<T, Failure>;
    fn infra(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn user(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: EXIT_USER, error: e.into() })
    }
    fn infra(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: EXIT_INFRA, error: e.into() })
    }
}

fn setup_failure(e: setup::SetupError) -> Failure {
    let code = if e.is_infra() { EXIT_INFRA } else { EXIT_USER };
    Failure { code, error: e.into() }
}

fn push_flag<T: ToString>(flags: &mut Vec<(String, String)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        flags.push((key.to_string(), v.to_string()));
    }
}

fn path_flag(p: &Option<PathBuf>) -> Option<String> {
    // JSON-quote so the value never parses as a number or bool
    p.as_ref().map(|p| serde_json::Value::String(p.display().to_string()).to_string())
}

impl RunArgs {
    fn flags(&self, out: &mut Vec<(String, String)>) {
        push_flag(out, "n_max", self.n);
        push_flag(out, "limits.timeout_s", self.timeout);
        push_flag(out, "executor.kind", self.executor.map(|e| if e == ExecutorArg::Real { "real" } else { "mock" }));
        push_flag(out, "paths.index", path_flag(&self.index));
        push_flag(out, "backend.transcripts", path_flag(&self.transcripts));
        if self.no_cot1 {
            push_flag(out, "ablation.auto_cot_1", Some(false));
        }
        if self.no_cot2 {
            push_flag(out, "ablation.auto_cot_2", Some(false));
        }
    }
}

fn config_flags(cli: &Cli) -> Result<Vec<(String, String)>, Failure> {
    let mut flags = Vec::new();
    for s in &cli.set {
        let (k, v) = s.split_once('=').ok_or_else(|| Failure {
            code: EXIT_USER,
            error: anyhow!("--set expects KEY=VALUE, got `{s}`"),
        })?;
        flags.push((k.trim().to_string(), v.to_string()));
    }
    match &cli.command {
        Command::Kb(KbCommand::Build(a)) => {
            push_flag(&mut flags, "kb.budget", a.budget);
            push_flag(&mut flags, "kb.min_comments", a.min_comments);
        }
        Command::Solve(a) => {
            a.run.flags(&mut flags);
            push_flag(&mut flags, "paths.dataset", path_flag(&a.dataset));
        }
        Command::Bench(a) => {
            a.run.flags(&mut flags);
            push_flag(&mut flags, "paths.dataset", path_flag(&a.dataset));
            push_flag(&mut flags, "workers", a.workers);
        }
        _ => {}
    }
    Ok(flags)
}

fn resolve(cli: &Cli) -> Result<Resolved, Failure> {
    let flags = config_flags(cli)?;
    resolve_config(&ConfigSources::from_process_env(cli.config.clone(), flags)).user()
}

fn open_in(path: &Path) -> Result<BufReader<fs::File>, Failure> {
    fs::File::open(path).map(BufReader::new).with_context(|| format!("cannot open {}", path.display())).user()
}

fn create_out(path: &Path) -> Result<BufWriter<fs::File>, Failure> {
    fs::File::create(path).map(BufWriter::new).with_context(|| format!("cannot create {}", path.display())).user()
}

fn kb_build(a: &KbBuildArgs, r: &Resolved) -> Result<i32, Failure> {
    let cfg = &r.config;
    let tokenizer = tokenize::by_name(&cfg.kb.tokenizer).ok_or_else(|| Failure {
        code: EXIT_USER,
        error: anyhow!("unknown tokenizer `{}`", cfg.kb.tokenizer),
    })?;
    let mut reader = DumpReader::open(open_in(&a.posts)?, open_in(&a.comments)?).user()?;
    let mut docs = Vec::new();
    for post in reader.by_ref() {
        let post = post.user()?;
        docs.extend(compose_documents(&post, cfg.kb.budget, cfg.kb.min_comments, tokenizer.as_ref()));
    }
    let n = write_documents(create_out(&a.out)?, &docs).user()?;
    let diag = reader.into_diagnostics();
    eprintln!("wrote {n} documents to {}", a.out.display());
    eprintln!("{}", serde_json::to_string(&diag).expect("diagnostics serialize"));
    Ok(EXIT_OK)
}

fn kb_index(a: &KbIndexArgs, r: &Resolved) -> Result<i32, Failure> {
    let docs = read_documents(open_in(&a.docs)?).user()?;
    if docs.is_empty() {
        return Err(Failure { code: EXIT_USER, error: anyhow!("{} holds no documents", a.docs.display()) });
    }
    let kb = KnowledgeBase::build(&docs, setup::embedder(&r.config.kb.embedder), &r.config.kb.index).infra()?;
    kb.save(&a.out, &a.docs).user()?;
    eprintln!("indexed {} documents into {}", kb.len(), a.out.display());
    Ok(EXIT_OK)
}

fn kb_query(a: &KbQueryArgs, r: &Resolved) -> Result<i32, Failure> {
    let kb = KnowledgeBase::open(&a.index, a.docs.as_deref(), setup::embedder(&r.config.kb.embedder)).user()?;
    let hits = kb.retrieve(&a.text, a.k).user()?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for h in hits {
        writeln!(out, "{}", serde_json::to_string(&h).expect("doc serializes")).infra()?;
    }
    Ok(EXIT_OK)
}

fn find_problem(a: &SolveArgs, r: &Resolved) -> Result<Problem, Failure> {
    let as_path = Path::new(&a.problem);
    let filter = ProblemFilter { problem_type: None, ..Default::default() };
    let (source, want) = if as_path.is_file() {
        (as_path.to_path_buf(), None)
    } else {
        let ds = r.config.paths.dataset.clone().ok_or_else(|| Failure {
            code: EXIT_USER,
            error: anyhow!("`{}` is not a file; pass --dataset to look it up by id", a.problem),
        })?;
        (ds, Some(a.problem.as_str()))
    };
    let loaded = bench::load_problems(&source, &filter).user()?;
    let mut problems = loaded.problems;
    match want {
        Some(id) => problems.into_iter().find(|p| p.id == id).ok_or_else(|| Failure {
            code: EXIT_USER,
            error: anyhow!("no problem `{id}` in {}", source.display()),
        }),
        None if problems.len() == 1 => Ok(problems.remove(0)),
        None => Err(Failure {
            code: EXIT_USER,
            error: anyhow!("{} holds {} problems; pass an id with --dataset", source.display(), problems.len()),
        }),
    }
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())).user(),
        None => io::stdout().lock().write_all(text.as_bytes()).infra(),
    }
}

fn solve(a: &SolveArgs, r: &Resolved) -> Result<i32, Failure> {
    let problem = find_problem(a, r)?;
    let engine = setup::engine(&r.config).map_err(setup_failure)?;
    let rec = engine.solve(&problem);
    write_json(a.out.as_deref(), &rec)?;
    if let Some(f) = &rec.infra_failure {
        eprintln!("infrastructure failure at attempt {} ({:?}): {}", f.attempt, f.stage, f.message);
        return Ok(EXIT_INFRA);
    }
    eprintln!("{:?} at attempt {}", rec.final_status, rec.stop_attempt);
    Ok(EXIT_OK)
}

fn finish_report(report: &BenchReport, out: &Path) -> Result<(), Failure> {
    bench::export_report(report, out).user()?;
    print!("{}", report.render_text());
    Ok(())
}

fn run_bench(a: &BenchArgs, r: &Resolved) -> Result<i32, Failure> {
    let cfg = &r.config;
    let dataset = cfg.paths.dataset.clone().ok_or_else(|| Failure {
        code: EXIT_USER,
        error: anyhow!("no dataset: pass --dataset or set paths.dataset"),
    })?;
    let filter = if a.libraries.is_empty() {
        ProblemFilter::default()
    } else {
        let libs = a.libraries.iter().map(|s| s.parse::<Library>()).collect::<Result<Vec<_>, _>>().user()?;
        ProblemFilter::libraries(libs)
    };
    let loaded = bench::load_problems(&dataset, &filter).user()?;
    for rej in &loaded.rejected {
        eprintln!("skipped {}: {}", rej.location, rej.reason);
    }
    let engine = setup::engine(cfg).map_err(setup_failure)?;
    let records = bench::run_benchmark(&engine, &loaded.problems, cfg.workers).infra()?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display())).user()?;
    bench::write_records(&records, a.out.join("records.jsonl")).user()?;
    write_json(Some(&a.out.join("rejected.json")), &loaded.rejected)?;
    let report = BenchReport::from_records(&records).user()?;
    finish_report(&report, &a.out)?;
    Ok(if report.infra_failures > 0 { EXIT_INFRA } else { EXIT_OK })
}

fn report(a: &ReportArgs) -> Result<i32, Failure> {
    let records = bench::read_records(&a.records).user()?;
    let report = BenchReport::from_records(&records).user()?;
    finish_report(&report, &a.out)?;
    Ok(EXIT_OK)
}

fn run_replay(a: &ReplayArgs) -> Result<i32, Failure> {
    let text = fs::read_to_string(&a.record).with_context(|| format!("cannot read {}", a.record.display())).user()?;
    let rec: dsrefine_core::RunRecord = serde_json::from_str(&text).context("not a run record").user()?;
    replay(&rec).user()?;
    let status = match rec.final_status {
        FinalStatus::Pass => "pass",
        FinalStatus::Fail => "fail",
        FinalStatus::InfraFail => "infra_fail",
    };
    eprintln!("replay matches: {status} at attempt {}", rec.stop_attempt);
    Ok(EXIT_OK)
}

fn show_config(a: &ConfigArgs, r: &Resolved) -> Result<i32, Failure> {
    write_json(None, &r.config)?;
    if a.origins {
        for (k, layer) in &r.origins {
            eprintln!("{k}: {layer}");
        }
    }
    Ok(EXIT_OK)
}

pub fn dispatch(cli: &Cli) -> Result<i32, Failure> {
    match &cli.command {
        Command::Report(a) => return report(a),
        Command::Replay(a) => return run_replay(a),
        _ => {}
    }
    let r = resolve(cli)?;
    match &cli.command {
        Command::Kb(KbCommand::Build(a)) => kb_build(a, &r),
        Command::Kb(KbCommand::Index(a)) => kb_index(a, &r),
        Command::Kb(KbCommand::Query(a)) => kb_query(a, &r),
        Command::Solve(a) => solve(a, &r),
        Command::Bench(a) => run_bench(a, &r),
        Command::Config(a) => show_config(a, &r),
        Command::Report(_) | Command::Replay(_) => unreachable!("handled above"),
    }
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USER } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}
