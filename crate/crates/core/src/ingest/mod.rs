//! Knowledge-base ingestion: dump parsing, cleansing and document
//! composition.

mod clean;
mod compose;
mod dump;

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use clean::{clean_text, decode_entities};
pub use compose::{
    allocate_windows, comment_line, compose_documents, post_line, KbDocument, Window,
    COMMENT_PREFIX, DEFAULT_BUDGET, DEFAULT_MIN_COMMENTS, POST_PREFIX,
};
pub use dump::{DumpReader, IngestDiagnostics};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unreadable dump at byte {position}: {message}")]
    Xml { position: u64, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid document line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
}

/// A post with its cleaned comments in dump order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbPost {
    pub post_id: u64,
    pub body: String,
    pub comments: Vec<String>,
}

/// Write documents as newline-delimited JSON.
pub fn write_documents<'a, W: Write>(
    mut out: W,
    docs: impl IntoIterator<Item = &'a KbDocument>,
) -> Result<usize, IngestError> {
    let mut n = 0;
    for doc in docs {
        serde_json::to_writer(&mut out, doc).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        n += 1;
    }
    out.flush()?;
    Ok(n)
}

pub fn read_documents<R: BufRead>(input: R) -> Result<Vec<KbDocument>, IngestError> {
    let mut docs = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(serde_json::from_str(&line).map_err(|source| IngestError::Json { line: i + 1, source })?);
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndjson_fields() {
        let doc = KbDocument {
            doc_id: "1-0".into(),
            post_id: 1,
            window_start: 0,
            text: "Post : a\nComment: b".into(),
            token_count: 6,
            comment_count: 1,
        };
        let mut buf = Vec::new();
        write_documents(&mut buf, [&doc]).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 6);
        for k in ["doc_id", "post_id", "window_start", "text", "token_count", "comment_count"] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
        assert_eq!(read_documents(&buf[..]).unwrap(), vec![doc]);
    }
}
