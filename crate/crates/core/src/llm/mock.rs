//! Scripted backend: replies come from a transcript, in order.
//!
//! Transcript files are JSON: either a list of entries (one problem) or an
//! object mapping problem id to its list. An entry is
//! `{"match": <substring or step index>, "reply": ..., "prompt_tokens": n,
//! "completion_tokens": n}`; `match` and the token counts are optional.
//! Missing token counts fall back to the tokenizer.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendFactory, ChatBackend, Completion, LlmError, SamplingConfig, TokenUsage};
use crate::prompt::RenderedPrompt;
use crate::tokenize::{default_tokenizer, SharedTokenizer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepMatch {
    /// Entry must be consumed at this 0-based step.
    Step(usize),
    /// Prompt text must contain this substring.
    Contains(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEntry {
    #[serde(rename = "match", default, skip_serializing_if = "Option::is_none")]
    pub matcher: Option<StepMatch>,
    pub reply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

impl MockEntry {
    pub fn reply(text: impl Into<String>) -> Self {
        Self { matcher: None, reply: text.into(), prompt_tokens: None, completion_tokens: None }
    }

    pub fn matching(mut self, m: StepMatch) -> Self {
        self.matcher = Some(m);
        self
    }

    pub fn with_usage(mut self, prompt: u64, completion: u64) -> Self {
        self.prompt_tokens = Some(prompt);
        self.completion_tokens = Some(completion);
        self
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum TranscriptFile {
    Single(Vec<MockEntry>),
    ByProblem(HashMap<String, Vec<MockEntry>>),
}

/// Transcripts for many problems; a factory handing each problem a fresh
/// cursor over its own entries.
#[derive(Debug, Clone, Default)]
pub struct MockTranscripts {
    by_problem: HashMap<String, Vec<MockEntry>>,
    shared: Option<Vec<MockEntry>>,
    tokenizer: Option<SharedTokenizer>,
}

impl MockTranscripts {
    /// The same transcript for every problem.
    pub fn single(entries: Vec<MockEntry>) -> Self {
        Self { shared: Some(entries), ..Default::default() }
    }

    pub fn by_problem(map: HashMap<String, Vec<MockEntry>>) -> Self {
        Self { by_problem: map, ..Default::default() }
    }

    pub fn insert(&mut self, problem_id: impl Into<String>, entries: Vec<MockEntry>) {
        self.by_problem.insert(problem_id.into(), entries);
    }

    pub fn with_tokenizer(mut self, t: SharedTokenizer) -> Self {
        self.tokenizer = Some(t);
        self
    }

    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        let parsed: TranscriptFile =
            serde_json::from_str(text).map_err(|e| LlmError::Config(format!("mock transcript: {e}")))?;
        Ok(match parsed {
            TranscriptFile::Single(v) => Self::single(v),
            TranscriptFile::ByProblem(m) => Self::by_problem(m),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn get(&self, problem_id: &str) -> Option<&[MockEntry]> {
        self.by_problem.get(problem_id).or(self.shared.as_ref()).map(Vec::as_slice)
    }
}

impl BackendFactory for MockTranscripts {
    fn for_problem(&self, problem_id: &str) -> Result<Box<dyn ChatBackend>, LlmError> {
        let entries = self.get(problem_id).ok_or_else(|| LlmError::Mock {
            step: 0,
            message: format!("no transcript for problem `{problem_id}`"),
        })?;
        let tokenizer = self.tokenizer.clone().unwrap_or_else(default_tokenizer);
        Ok(Box::new(MockBackend::new(entries.to_vec(), tokenizer)))
    }
}

#[derive(Debug)]
pub struct MockBackend {
    entries: Vec<MockEntry>,
    cursor: Mutex<usize>,
    tokenizer: SharedTokenizer,
}

impl MockBackend {
    pub fn new(entries: Vec<MockEntry>, tokenizer: SharedTokenizer) -> Self {
        Self { entries, cursor: Mutex::new(0), tokenizer }
    }

    pub fn consumed(&self) -> usize {
        *self.cursor.lock().expect("cursor lock")
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, prompt: &RenderedPrompt, _cfg: &SamplingConfig) -> Result<Completion, LlmError> {
        let mut cursor = self.cursor.lock().expect("cursor lock");
        let step = *cursor;
        let entry = self.entries.get(step).ok_or_else(|| LlmError::Mock {
            step,
            message: format!("transcript exhausted ({} entries)", self.entries.len()),
        })?;
        match &entry.matcher {
            Some(StepMatch::Step(s)) if *s != step => {
                return Err(LlmError::Mock { step, message: format!("entry is scripted for step {s}") });
            }
            Some(StepMatch::Contains(needle)) if !prompt.text.contains(needle.as_str()) => {
                return Err(LlmError::Mock { step, message: format!("prompt does not contain {needle:?}") });
            }
            _ => {}
        }
        *cursor += 1;
        let usage = TokenUsage::new(
            entry.prompt_tokens.unwrap_or_else(|| self.tokenizer.count(&prompt.text) as u64),
            entry.completion_tokens.unwrap_or_else(|| self.tokenizer.count(&entry.reply) as u64),
        );
        Ok(Completion { text: entry.reply.clone(), usage })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::PromptKind;

    fn prompt(text: &str) -> RenderedPrompt {
        RenderedPrompt { kind: PromptKind::InitialCot, text: text.into(), bindings: Default::default(), token_count: 0 }
    }

    #[test]
    fn scripted_reply_and_usage() {
        let f = MockTranscripts::single(vec![MockEntry::reply("R").with_usage(11, 3)]);
        let b = f.for_problem("any").unwrap();
        let c = b.complete(&prompt("hi"), &SamplingConfig::default()).unwrap();
        assert_eq!(c, Completion { text: "R".into(), usage: TokenUsage::new(11, 3) });
    }

    #[test]
    fn exhaustion_and_mismatch_name_the_step() {
        let f = MockTranscripts::single(vec![
            MockEntry::reply("a"),
            MockEntry::reply("b").matching(StepMatch::Contains("FEEDBACK".into())),
        ]);
        let b = f.for_problem("p").unwrap();
        let cfg = SamplingConfig::default();
        b.complete(&prompt("first"), &cfg).unwrap();
        match b.complete(&prompt("no marker"), &cfg) {
            Err(LlmError::Mock { step: 1, message }) => assert!(message.contains("FEEDBACK")),
            other => panic!("{other:?}"),
        }
        b.complete(&prompt("FEEDBACK: x"), &cfg).unwrap();
        assert!(matches!(b.complete(&prompt("x"), &cfg), Err(LlmError::Mock { step: 2, .. })));

        let f = MockTranscripts::single(vec![MockEntry::reply("a").matching(StepMatch::Step(1))]);
        let b = f.for_problem("p").unwrap();
        assert!(matches!(b.complete(&prompt("x"), &cfg), Err(LlmError::Mock { step: 0, .. })));
    }

    #[test]
    fn fallback_usage_counts_tokens() {
        let f = MockTranscripts::single(vec![MockEntry::reply("x = 1")]);
        let c = f.for_problem("p").unwrap().complete(&prompt("two words"), &SamplingConfig::default()).unwrap();
        assert_eq!(c.usage, TokenUsage::new(2, 3));
    }

    #[test]
    fn json_formats() {
        let one = MockTranscripts::from_json(r#"[{"reply": "a", "prompt_tokens": 1, "completion_tokens": 2}]"#).unwrap();
        assert_eq!(one.get("whatever").unwrap().len(), 1);
        let many = MockTranscripts::from_json(
            r#"{"p1": [{"match": 0, "reply": "a"}], "p2": [{"match": "Post", "reply": "b"}]}"#,
        )
        .unwrap();
        assert_eq!(many.get("p1").unwrap()[0].matcher, Some(StepMatch::Step(0)));
        assert_eq!(many.get("p2").unwrap()[0].matcher, Some(StepMatch::Contains("Post".into())));
        assert!(many.for_problem("p3").is_err());
        assert!(MockTranscripts::from_json("{").is_err());
    }

    #[test]
    fn replay_is_identical() {
        let f = MockTranscripts::single(vec![MockEntry::reply("a"), MockEntry::reply("b")]);
        let run = || {
            let b = f.for_problem("p").unwrap();
            (0..2).map(|_| b.complete(&prompt("q"), &SamplingConfig::default()).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
