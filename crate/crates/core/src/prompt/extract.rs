use serde::{Deserialize, Serialize};

use super::PromptError;

/// Candidate source produced by one attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateCode {
    pub source: String,
    /// 1-based attempt that produced it.
    pub attempt_index: usize,
}

fn is_lang_tag(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "_+-.#".contains(c))
}

/// Pull code out of a model reply.
///
/// The first ``` fence wins. A language tag right after the opening fence
/// is dropped, as is the newline ending a fence line. Replies without any
/// fence are taken whole, trimmed.
pub fn extract_code(output: &str, attempt_index: usize) -> Result<CandidateCode, PromptError> {
    let source = match output.find("```") {
        None => output.trim().to_string(),
        Some(open) => {
            let mut body = &output[open + 3..];
            // a fence may be longer than three backticks
            body = body.trim_start_matches('`');
            if let Some(nl) = body.find('\n') {
                let head = body[..nl].trim_end_matches('\r');
                if head.trim().is_empty() || is_lang_tag(head.trim()) {
                    body = &body[nl + 1..];
                }
            }
            let inner = match body.find("```") {
                Some(close) => &body[..close],
                None => body,
            };
            let inner = inner.strip_suffix('\n').unwrap_or(inner);
            let inner = inner.strip_suffix('\r').unwrap_or(inner);
            inner.to_string()
        }
    };
    if source.trim().is_empty() {
        return Err(PromptError::NoCode);
    }
    Ok(CandidateCode { source, attempt_index })
}
