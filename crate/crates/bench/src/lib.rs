//! Synthetic workloads shared by the benchmarks.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dsrefine_core::config::EngineConfig;
use dsrefine_core::exec::{ExecutionResult, MissPolicy, MockExecutor, MockOutcome};
use dsrefine_core::ingest::KbPost;
use dsrefine_core::llm::{BackendRegistry, MockEntry, MockTranscripts};
use dsrefine_core::problem::{Library, Problem, ProblemType};
use dsrefine_core::prompt::PromptBuilder;
use dsrefine_core::refine::Engine;
use dsrefine_core::tokenize::default_tokenizer;

pub fn unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..dim).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

const WORDS: [&str; 12] = ["df", "array", "axis", "merge", "index", "plot", "tensor", "fit", "shape", "dtype", "groupby", "mean"];

fn sentence(rng: &mut ChaCha8Rng, words: usize) -> String {
    (0..words).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

pub fn posts(n: usize, max_comments: usize, seed: u64) -> Vec<KbPost> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n as u64)
        .map(|post_id| {
            let len = rng.random_range(20..200);
            let body = sentence(&mut rng, len);
            let nc = rng.random_range(0..=max_comments);
            let comments = (0..nc)
                .map(|_| {
                    let len = rng.random_range(5..80);
                    sentence(&mut rng, len)
                })
                .collect();
            KbPost { post_id, body, comments }
        })
        .collect()
}

/// `n` toy problems; problem `i` passes at attempt `i % (n_max + 1) + 1`,
/// or never when that exceeds `n_max`.
pub fn scripted_fleet(n: usize, n_max: usize) -> (Engine, Vec<Problem>) {
    let mut transcripts = MockTranscripts::default();
    let mut exec = MockExecutor::new(MissPolicy::Fail);
    let mut problems = Vec::new();
    for i in 0..n {
        let id = format!("toy-{i:03}");
        let pass_at = i % (n_max + 1) + 1;
        let mut entries = Vec::new();
        for a in 1..=n_max {
            entries.push(MockEntry::reply(format!("Think about step {a}.")).with_usage(120, 20));
            let code = if a == pass_at { format!("result = {i}") } else { format!("result = {i} + {a}") };
            entries.push(MockEntry::reply(format!("```python\n{code}\n```")).with_usage(80, 10));
        }
        transcripts.insert(id.clone(), entries);
        exec.insert(&format!("result = {i}"), vec![MockOutcome::Exec(ExecutionResult::pass())]);
        problems.push(Problem {
            id,
            library: Library::ALL[i % Library::ALL.len()],
            description: format!("Set result to {i}."),
            code_context: "import numpy as np\n[insert]".into(),
            test_suite: format!("assert result == {i}"),
            problem_type: ProblemType::Completion,
            reference_solution: None,
            evaluation: Default::default(),
        });
    }
    let cfg = EngineConfig { n_max, ..Default::default() };
    let prompts = PromptBuilder::from_config(cfg.prompt.clone(), default_tokenizer()).expect("builtin templates");
    let engine = Engine::new(cfg, prompts, BackendRegistry::single(Arc::new(transcripts)), Arc::new(exec));
    (engine, problems)
}
