use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dsrefine_core::exec::{ExecutionResult, MissPolicy, MockExecutor, MockOutcome};
use dsrefine_core::RunRecord;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dsrefine"));
    // keep the developer's environment out of config resolution
    for (k, _) in std::env::vars() {
        if k.starts_with("DSREFINE__") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

/// Three toy problems passing at attempts 1, 2 and 5.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let problems = serde_json::json!([
            {"id": "a", "library": "SciPy", "description": "Set result to 1.", "code_context": "import scipy\n[insert]", "test_suite": "assert result == 1"},
            {"id": "b", "library": "PyTorch", "description": "Set result to 2.", "code_context": "import torch\n[insert]", "test_suite": "assert result == 2"},
            {"id": "c", "library": "Sklearn", "description": "Set result to 3.", "code_context": "import sklearn\n[insert]", "test_suite": "assert result == 3"}
        ]);
        fs::write(dir.path().join("problems.json"), problems.to_string()).unwrap();
        let reply = |code: &str| serde_json::json!({"reply": format!("```python\n{code}\n```"), "prompt_tokens": 50, "completion_tokens": 5});
        let cot = serde_json::json!({"reply": "Think it through.", "prompt_tokens": 100, "completion_tokens": 10});
        let script = |codes: &[&str]| codes.iter().flat_map(|c| [cot.clone(), reply(c)]).collect::<Vec<_>>();
        let transcripts = serde_json::json!({
            "a": script(&["result = 1"]),
            "b": script(&["result = 0", "result = 2"]),
            "c": script(&["result = 0", "result = 5", "result = 6", "result = 7", "result = 3"]),
        });
        fs::write(dir.path().join("transcripts.json"), transcripts.to_string()).unwrap();
        let pass = MockOutcome::Exec(ExecutionResult::pass());
        let exec = MockExecutor::new(MissPolicy::Fail).on_source("result = 1", pass.clone()).on_source("result = 2", pass.clone()).on_source("result = 3", pass);
        fs::write(dir.path().join("exec.json"), serde_json::to_string(&exec).unwrap()).unwrap();
        let config = serde_json::json!({
            "n_max": 5,
            "backend": {"kind": "mock", "transcripts": dir.path().join("transcripts.json")},
            "executor": {"kind": "mock", "script": dir.path().join("exec.json")},
        });
        fs::write(dir.path().join("config.json"), config.to_string()).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }
}

#[test]
fn help_lists_subcommands() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let help = text(&out.stdout);
    for sub in ["kb", "solve", "bench", "report", "replay", "config"] {
        assert!(help.contains(sub), "missing {sub} in\n{help}");
    }
    let out = run(&["bench", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    let out = run(&["kb", "--help"]);
    assert!(text(&out.stdout).contains("query"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["bench", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["bench"]).status.code(), Some(1));
    assert_eq!(run(&["bench", "--out", "/tmp/x", "--executor", "docker"]).status.code(), Some(1));
}

/// Every flag CONFIG.md documents for a subcommand appears in its help.
#[test]
fn help_matches_config_doc() {
    let doc = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../CONFIG.md")).unwrap();
    let mut section: Option<Vec<String>> = None;
    let mut checked = 0;
    for line in doc.lines() {
        if let Some(rest) = line.strip_prefix("### `dsrefine") {
            let words: Vec<String> = rest.trim_end_matches('`').split_whitespace().map(String::from).collect();
            section = Some(words);
            continue;
        }
        if line.starts_with("## ") {
            section = None;
        }
        let (Some(words), Some(row)) = (&section, line.strip_prefix("| `")) else { continue };
        let flag = row.split('`').next().unwrap().split_whitespace().next().unwrap();
        let mut args: Vec<&str> = words.iter().map(String::as_str).collect();
        args.push("--help");
        let help = text(&run(&args).stdout);
        assert!(help.contains(flag), "`dsrefine {}` help lacks {flag}", words.join(" "));
        checked += 1;
    }
    assert!(checked >= 20, "only {checked} flags found in CONFIG.md");
}

#[test]
fn toy_bench_end_to_end() {
    let fx = Fixture::new();
    let out = run(&["bench", "--config", &fx.p("config.json"), "--dataset", &fx.p("problems.json"), "--workers", "2", "--out", &fx.p("report")]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    for f in ["report.json", "pass_at_n.csv", "cumulative.csv", "tokens.csv", "report.txt", "records.jsonl", "rejected.json"] {
        assert!(fx.path("report").join(f).is_file(), "missing {f}");
    }
    let cumulative = fs::read_to_string(fx.path("report/cumulative.csv")).unwrap();
    assert_eq!(cumulative, "attempt,count\n1,1\n2,2\n3,2\n4,2\n5,3\n");
    let stdout = text(&out.stdout);
    assert!(stdout.contains("66.7"), "{stdout}");

    // report rebuilds identical files from the records
    let again = run(&["report", "--records", &fx.p("report/records.jsonl"), "--out", &fx.p("again")]);
    assert_eq!(again.status.code(), Some(0));
    for f in ["report.json", "pass_at_n.csv", "report.txt"] {
        assert_eq!(fs::read(fx.path("report").join(f)).unwrap(), fs::read(fx.path("again").join(f)).unwrap());
    }

    // library filter
    let out = run(&["bench", "--config", &fx.p("config.json"), "--dataset", &fx.p("problems.json"), "--libraries", "scipy,torch", "--n", "2", "--out", &fx.p("two")]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(fx.path("two/report.json")).unwrap()).unwrap();
    assert_eq!(rep["problems"], 2);
    assert_eq!(rep["overall"]["2"], 1.0);
}

#[test]
fn infra_failure_exits_two() {
    let fx = Fixture::new();
    let mut problems: serde_json::Value = serde_json::from_str(&fs::read_to_string(fx.path("problems.json")).unwrap()).unwrap();
    problems.as_array_mut().unwrap().push(serde_json::json!(
        {"id": "d", "library": "NumPy", "description": "No transcript.", "code_context": "[insert]", "test_suite": "assert 1"}
    ));
    fs::write(fx.path("problems.json"), problems.to_string()).unwrap();
    let out = run(&["bench", "--config", &fx.p("config.json"), "--dataset", &fx.p("problems.json"), "--out", &fx.p("r")]);
    assert_eq!(out.status.code(), Some(2));
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(fx.path("r/report.json")).unwrap()).unwrap();
    assert_eq!(rep["infra_failures"], 1);
    // stop counts include the problem that stopped on infrastructure
    assert_eq!(rep["cumulative_stop"]["5"], 4);
}

#[test]
fn solve_then_replay() {
    let fx = Fixture::new();
    let out = run(&["solve", "--config", &fx.p("config.json"), "--dataset", &fx.p("problems.json"), "--problem", "b", "--n", "5"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let rec: RunRecord = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((rec.problem_id.as_str(), rec.stop_attempt), ("b", 2));
    assert!(rec.passed());

    let out = run(&["solve", "--config", &fx.p("config.json"), "--dataset", &fx.p("problems.json"), "--problem", "b", "--no-cot1", "--no-cot2", "--out", &fx.p("b.json")]);
    // without CoT calls the code replies fall out of step with the transcript
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let rec: RunRecord = serde_json::from_str(&fs::read_to_string(fx.path("b.json")).unwrap()).unwrap();
    assert!(rec.attempts.iter().all(|a| a.cot_prompt.is_none()));
    assert_eq!(rec.config_snapshot.ablation.auto_cot_1, false);

    let ok = run(&["replay", "--record", &fx.p("b.json")]);
    assert_eq!(ok.status.code(), Some(0), "{}", text(&ok.stderr));

    let mut bad: serde_json::Value = serde_json::from_str(&fs::read_to_string(fx.path("b.json")).unwrap()).unwrap();
    bad["attempts"][0]["code_response"]["text"] = "```python\nresult = 42\n```".into();
    fs::write(fx.path("bad.json"), bad.to_string()).unwrap();
    let diverged = run(&["replay", "--record", &fx.p("bad.json")]);
    assert_eq!(diverged.status.code(), Some(1));
    assert!(text(&diverged.stderr).contains("attempt 1"), "{}", text(&diverged.stderr));

    let missing = run(&["solve", "--config", &fx.p("config.json"), "--dataset", &fx.p("problems.json"), "--problem", "zzz"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn config_layers_and_errors() {
    let fx = Fixture::new();
    let out = bin().args(["config", "--config", &fx.p("config.json"), "--origins"]).env("DSREFINE__RETRIEVAL__K", "2").output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((cfg["n_max"].as_u64(), cfg["retrieval"]["k"].as_u64()), (Some(5), Some(2)));
    assert!(text(&out.stderr).contains("retrieval.k: environment"));

    let out = run(&["config", "--config", &fx.p("config.json"), "--set", "n_max=3"]);
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["n_max"], 3);

    let out = run(&["config", "--set", "llm.cot_model.temperature=3.5"]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert!(err.contains("llm.cot_model.temperature") && err.contains("command line"), "{err}");

    let out = bin().args(["config"]).env("DSREFINE__N_MAX", "many").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("environment"));
}

#[test]
fn kb_build_index_query() {
    let dir = tempfile::tempdir().unwrap();
    let comments: String = (0..12).map(|i| format!("  <row Id=\"{i}\" PostId=\"1\" Text=\"use np.linalg.inv for inverse {i}\" />\n")).collect();
    let comments2: String = (0..12).map(|i| format!("  <row Id=\"{}\" PostId=\"2\" Text=\"plt.legend takes loc {i}\" />\n", 100 + i)).collect();
    fs::write(
        dir.path().join("Posts.xml"),
        "<posts>\n  <row Id=\"1\" PostTypeId=\"1\" Body=\"&lt;p&gt;How do I invert a numpy matrix?&lt;/p&gt;\" />\n  <row Id=\"2\" PostTypeId=\"1\" Body=\"&lt;p&gt;Move a matplotlib legend&lt;/p&gt;\" />\n</posts>\n",
    )
    .unwrap();
    fs::write(dir.path().join("Comments.xml"), format!("<comments>\n{comments}{comments2}</comments>\n")).unwrap();
    let p = |n: &str| dir.path().join(n).display().to_string();
    let out = run(&["kb", "build", "--posts", &p("Posts.xml"), "--comments", &p("Comments.xml"), "--out", &p("docs.jsonl")]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let docs = fs::read_to_string(dir.path().join("docs.jsonl")).unwrap();
    // twelve comments slide a ten-comment window to three offsets per post
    assert_eq!(docs.lines().count(), 6);

    // a minimum the posts cannot meet yields no documents
    let out = run(&["kb", "build", "--posts", &p("Posts.xml"), "--comments", &p("Comments.xml"), "--out", &p("none.jsonl"), "--min-comments", "13"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read_to_string(dir.path().join("none.jsonl")).unwrap(), "");

    let out = run(&["kb", "index", "--docs", &p("docs.jsonl"), "--out", &p("kb.idx")]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let out = run(&["kb", "query", "--index", &p("kb.idx"), "--text", "invert a numpy matrix", "-k", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let hit: serde_json::Value = serde_json::from_str(text(&out.stdout).lines().next().unwrap()).unwrap();
    assert!(hit["doc_id"].as_str().unwrap().starts_with("1-"), "{hit}");

    let out = run(&["kb", "query", "--index", &p("missing.idx"), "--text", "x"]);
    assert_eq!(out.status.code(), Some(1));
}
