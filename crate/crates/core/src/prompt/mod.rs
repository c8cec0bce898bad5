//! Prompt rendering for the four generation steps, and code extraction
//! from model replies.

mod extract;
mod template;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Feedback;
use crate::kb::RetrievedDoc;
use crate::problem::{Problem, INSERT_MARKER};
use crate::tokenize::SharedTokenizer;

pub use extract::{extract_code, CandidateCode};
pub use template::Template;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template `{name}`: {message}")]
    Template { name: String, message: String },
    #[error("template `{template}` placeholder `{name}` is unbound")]
    Unbound { template: String, name: String },
    #[error("cannot read template directory {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("problem `{0}` has no `[insert]` marker line")]
    MissingMarker(String),
    #[error("no code produced")]
    NoCode,
    #[error("{0}")]
    Precondition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    InitialCot,
    CorrectionCot,
    InitialCode,
    CorrectionCode,
}

impl PromptKind {
    pub const ALL: [PromptKind; 4] =
        [PromptKind::InitialCot, PromptKind::CorrectionCot, PromptKind::InitialCode, PromptKind::CorrectionCode];

    pub fn file_name(self) -> &'static str {
        match self {
            PromptKind::InitialCot => "initial_cot.txt",
            PromptKind::CorrectionCot => "correction_cot.txt",
            PromptKind::InitialCode => "initial_code.txt",
            PromptKind::CorrectionCode => "correction_code.txt",
        }
    }

    fn builtin_source(self) -> &'static str {
        match self {
            PromptKind::InitialCot => include_str!("../../templates/initial_cot.txt"),
            PromptKind::CorrectionCot => include_str!("../../templates/correction_cot.txt"),
            PromptKind::InitialCode => include_str!("../../templates/initial_code.txt"),
            PromptKind::CorrectionCode => include_str!("../../templates/correction_code.txt"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub kind: PromptKind,
    pub text: String,
    pub bindings: BTreeMap<String, String>,
    pub token_count: usize,
}

#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<PromptKind, Template>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = PromptKind::ALL
            .iter()
            .map(|&k| (k, Template::parse(k.file_name(), k.builtin_source()).expect("builtin template parses")))
            .collect();
        Self { templates }
    }

    /// Load one file per kind from `dir`; absent files fall back to the
    /// built-in template.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let mut set = Self::builtin();
        for kind in PromptKind::ALL {
            let path = dir.join(kind.file_name());
            match fs::read_to_string(&path) {
                Ok(src) => {
                    set.templates.insert(kind, Template::parse(kind.file_name(), &src)?);
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(source) => return Err(PromptError::Io { path: path.display().to_string(), source }),
            }
        }
        Ok(set)
    }

    pub fn get(&self, kind: PromptKind) -> &Template {
        &self.templates[&kind]
    }

    pub fn builtin_source(kind: PromptKind) -> &'static str {
        kind.builtin_source()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    /// Token ceiling for a rendered Auto-CoT 1 prompt.
    pub context_budget_tokens: usize,
    /// Byte ceiling for feedback text; longer feedback keeps its tail.
    pub feedback_cap_bytes: usize,
    pub doc_delimiter: String,
    pub no_post_line: String,
    pub template_dir: Option<String>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            context_budget_tokens: 6000,
            feedback_cap_bytes: 16 * 1024,
            doc_delimiter: "-----".into(),
            no_post_line: "No reference post is available for this problem.".into(),
            template_dir: None,
        }
    }
}

/// Problem text handed to the CoT generators: the description followed by
/// the code scaffold.
pub fn problem_text(problem: &Problem) -> String {
    format!("{}\n\nCode context:\n```python\n{}\n```", problem.description.trim_end(), problem.code_context.trim_end())
}

/// Cut `text` to its longest prefix with at most `max_tokens` tokens.
fn truncate_tokens(text: &str, max_tokens: usize, tok: &SharedTokenizer) -> String {
    if tok.count(text) <= max_tokens {
        return text.to_string();
    }
    let bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).chain([text.len()]).collect();
    let (mut lo, mut hi) = (0usize, bounds.len() - 1);
    while lo < hi {
        let mid = (lo + hi + 1) / 2;
        if tok.count(&text[..bounds[mid]]) <= max_tokens {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    text[..bounds[lo]].to_string()
}

/// Keep the last `cap` bytes of `text`, starting at a line boundary.
pub fn tail_truncate(text: &str, cap: usize) -> (String, bool) {
    if text.len() <= cap {
        return (text.to_string(), false);
    }
    let mut start = text.len() - cap;
    while !text.is_char_boundary(start) {
        start += 1;
    }
    if let Some(nl) = text[start..].find('\n') {
        if start + nl + 1 < text.len() {
            start += nl + 1;
        }
    }
    let dropped = start;
    (format!("[... {dropped} bytes truncated ...]\n{}", &text[start..]), true)
}

#[derive(Debug, Clone)]
pub struct PromptBuilder {
    templates: TemplateSet,
    config: PromptConfig,
    tokenizer: SharedTokenizer,
}

impl PromptBuilder {
    pub fn new(templates: TemplateSet, config: PromptConfig, tokenizer: SharedTokenizer) -> Self {
        Self { templates, config, tokenizer }
    }

    pub fn from_config(config: PromptConfig, tokenizer: SharedTokenizer) -> Result<Self, PromptError> {
        let templates = match &config.template_dir {
            Some(dir) => TemplateSet::load_dir(dir)?,
            None => TemplateSet::builtin(),
        };
        Ok(Self::new(templates, config, tokenizer))
    }

    pub fn config(&self) -> &PromptConfig {
        &self.config
    }

    fn finish(&self, kind: PromptKind, bindings: BTreeMap<String, String>) -> Result<RenderedPrompt, PromptError> {
        let text = self.templates.get(kind).render(&bindings)?;
        let token_count = self.tokenizer.count(&text);
        Ok(RenderedPrompt { kind, text, bindings, token_count })
    }

    fn feedback_body(&self, feedback: &Feedback, bindings: &mut BTreeMap<String, String>) -> String {
        let (body, cut) = tail_truncate(&feedback.body, self.config.feedback_cap_bytes);
        if cut {
            bindings.insert(
                "truncation.feedback".into(),
                format!("kept last {} of {} bytes", self.config.feedback_cap_bytes, feedback.body.len()),
            );
        }
        body
    }

    fn join_docs(&self, docs: &[&str]) -> String {
        let sep = format!("\n{}\n", self.config.doc_delimiter);
        docs.join(&sep)
    }

    /// Auto-CoT 1: problem plus retrieved posts. An empty `docs` slice
    /// renders the fixed no-post line.
    pub fn render_initial_cot(&self, problem: &Problem, docs: &[RetrievedDoc]) -> Result<RenderedPrompt, PromptError> {
        let kind = PromptKind::InitialCot;
        let mut bindings = BTreeMap::new();
        bindings.insert("problem_description".to_string(), problem_text(problem));
        if docs.is_empty() {
            bindings.insert("post".to_string(), self.config.no_post_line.clone());
            return self.finish(kind, bindings);
        }

        let mut texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        let mut dropped = 0;
        loop {
            bindings.insert("post".to_string(), self.join_docs(&texts));
            let rendered = self.templates.get(kind).render(&bindings)?;
            let total = self.tokenizer.count(&rendered);
            if total <= self.config.context_budget_tokens {
                break;
            }
            if texts.len() > 1 {
                texts.pop();
                dropped += 1;
                continue;
            }
            let overflow = total - self.config.context_budget_tokens;
            let doc_tokens = self.tokenizer.count(texts[0]);
            let keep = doc_tokens.saturating_sub(overflow);
            let cut = truncate_tokens(texts[0], keep, &self.tokenizer);
            bindings.insert("post".to_string(), cut);
            bindings.insert(
                "truncation.post".into(),
                format!("dropped {dropped} lower-ranked document(s); top document cut from {doc_tokens} to {keep} tokens"),
            );
            return self.finish(kind, bindings);
        }
        if dropped > 0 {
            bindings.insert("truncation.post".into(), format!("dropped {dropped} lower-ranked document(s)"));
        }
        self.finish(kind, bindings)
    }

    /// Auto-CoT 2: problem, the previous candidate and its feedback.
    pub fn render_correction_cot(
        &self,
        problem: &Problem,
        generated_code: &str,
        feedback: &Feedback,
    ) -> Result<RenderedPrompt, PromptError> {
        if feedback.body.trim().is_empty() {
            return Err(PromptError::Precondition("feedback must be non-empty".into()));
        }
        let mut bindings = BTreeMap::new();
        let fb = self.feedback_body(feedback, &mut bindings);
        bindings.insert("problem_description".into(), problem_text(problem));
        bindings.insert("generated_code".into(), generated_code.to_string());
        bindings.insert("feedback".into(), fb);
        self.finish(PromptKind::CorrectionCot, bindings)
    }

    /// First code generation. An empty `cot` omits the suggestions block.
    pub fn render_initial_code(&self, problem: &Problem, cot: &str) -> Result<RenderedPrompt, PromptError> {
        if !problem.code_context.split('\n').any(|l| l.trim() == INSERT_MARKER) {
            return Err(PromptError::MissingMarker(problem.id.clone()));
        }
        let mut bindings = BTreeMap::new();
        bindings.insert("problem_description".into(), problem.description.trim_end().to_string());
        bindings.insert("code_context".into(), problem.code_context.trim_end().to_string());
        bindings.insert("cot_suggestion".into(), cot.trim().to_string());
        self.finish(PromptKind::InitialCode, bindings)
    }

    /// Regeneration after feedback. An empty `cot` omits the suggestions block.
    pub fn render_correction_code(
        &self,
        generated_code: &str,
        feedback: &Feedback,
        cot: &str,
    ) -> Result<RenderedPrompt, PromptError> {
        if feedback.body.trim().is_empty() {
            return Err(PromptError::Precondition("feedback must be non-empty".into()));
        }
        let mut bindings = BTreeMap::new();
        let fb = self.feedback_body(feedback, &mut bindings);
        bindings.insert("generated_code".into(), generated_code.to_string());
        bindings.insert("feedback".into(), fb);
        bindings.insert("cot_suggestion".into(), cot.trim().to_string());
        self.finish(PromptKind::CorrectionCode, bindings)
    }
}
