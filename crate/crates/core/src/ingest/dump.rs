//! Streaming reader for forum dump XML (`Posts.xml` / `Comments.xml`).
//!
//! Both files are flat `<row .../>` lists. Comments are grouped by their
//! `PostId` up front; posts are then streamed one at a time with their
//! comments attached in source order. A row is classified by its
//! attributes (`PostId` + `Text` is a comment, `Id` + `Body` is a post),
//! so a single interleaved stream works as well as two separate files.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};

use super::clean::clean_text;
use super::{IngestError, KbPost};

/// Tally of records that were skipped while reading a dump.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestDiagnostics {
    pub posts_read: u64,
    pub comments_read: u64,
    pub malformed_records: u64,
    pub orphan_comments: u64,
    pub duplicate_posts: u64,
    pub posts_without_comments: u64,
    pub empty_posts: u64,
    pub empty_comments: u64,
}

impl IngestDiagnostics {
    /// Number of records dropped for any reason.
    pub fn skipped(&self) -> u64 {
        self.malformed_records
            + self.orphan_comments
            + self.duplicate_posts
            + self.posts_without_comments
            + self.empty_posts
            + self.empty_comments
    }
}

enum Row {
    Post { id: u64, body: String },
    Comment { post_id: u64, text: String },
    Other,
}

fn classify(e: &BytesStart<'_>) -> Result<Row, ()> {
    let mut id = None;
    let mut post_id = None;
    let mut body = None;
    let mut text = None;
    for attr in e.attributes() {
        let attr = attr.map_err(|_| ())?;
        let value = || attr.unescape_value().map(|v| v.into_owned()).map_err(|_| ());
        match attr.key.as_ref() {
            b"Id" => id = Some(value()?),
            b"PostId" => post_id = Some(value()?),
            b"Body" => body = Some(value()?),
            b"Text" => text = Some(value()?),
            _ => {}
        }
    }
    let parse = |s: String| s.trim().parse::<u64>().map_err(|_| ());
    if let Some(pid) = post_id {
        let text = text.ok_or(())?;
        return Ok(Row::Comment { post_id: parse(pid)?, text });
    }
    if let Some(body) = body {
        let id = id.ok_or(())?;
        return Ok(Row::Post { id: parse(id)?, body });
    }
    if text.is_some() {
        // a comment row without PostId
        return Err(());
    }
    Ok(Row::Other)
}

/// Pull the next `<row>` element out of a reader. `None` at end of stream.
fn next_row<R: BufRead>(
    reader: &mut Reader<R>,
    buf: &mut Vec<u8>,
    diag: &mut IngestDiagnostics,
) -> Result<Option<Row>, IngestError> {
    loop {
        buf.clear();
        let ev = reader
            .read_event_into(buf)
            .map_err(|e| IngestError::Xml { position: reader.buffer_position(), message: e.to_string() })?;
        match ev {
            Event::Eof => return Ok(None),
            Event::Empty(ref e) | Event::Start(ref e) if e.name().as_ref() == b"row" => {
                match classify(e) {
                    Ok(Row::Other) => {
                        diag.malformed_records += 1;
                    }
                    Ok(row) => return Ok(Some(row)),
                    Err(()) => {
                        diag.malformed_records += 1;
                    }
                }
            }
            _ => {}
        }
    }
}

fn make_reader<R: BufRead>(r: R) -> Reader<R> {
    let mut reader = Reader::from_reader(r);
    reader.config_mut().trim_text(true);
    reader
}

/// Iterator over posts that have at least one comment.
///
/// Memory is bounded by the grouped comment table plus one post; the post
/// stream itself is never buffered.
pub struct DumpReader<R: BufRead> {
    posts: Reader<R>,
    buf: Vec<u8>,
    comments: HashMap<u64, Vec<String>>,
    seen: HashSet<u64>,
    diag: IngestDiagnostics,
    finished: bool,
}

impl<R: BufRead> DumpReader<R> {
    /// Reads the whole comment stream, then prepares to stream posts.
    pub fn open<C: BufRead>(posts: R, comments: C) -> Result<Self, IngestError> {
        let mut diag = IngestDiagnostics::default();
        let mut grouped: HashMap<u64, Vec<String>> = HashMap::new();
        let mut reader = make_reader(comments);
        let mut buf = Vec::new();
        while let Some(row) = next_row(&mut reader, &mut buf, &mut diag)? {
            match row {
                Row::Comment { post_id, text } => {
                    diag.comments_read += 1;
                    let cleaned = clean_text(&text);
                    if cleaned.is_empty() {
                        diag.empty_comments += 1;
                    } else {
                        grouped.entry(post_id).or_default().push(cleaned);
                    }
                }
                // Posts inside the comment stream are not expected.
                Row::Post { .. } | Row::Other => diag.malformed_records += 1,
            }
        }
        Ok(Self {
            posts: make_reader(posts),
            buf,
            comments: grouped,
            seen: HashSet::new(),
            diag,
            finished: false,
        })
    }

    /// Counters so far. Orphan comments are only known once the post
    /// stream is exhausted.
    pub fn diagnostics(&self) -> &IngestDiagnostics {
        &self.diag
    }

    pub fn into_diagnostics(self) -> IngestDiagnostics {
        self.diag
    }

    fn finish(&mut self) {
        if !self.finished {
            self.finished = true;
            self.diag.orphan_comments += self.comments.values().map(|v| v.len() as u64).sum::<u64>();
            self.comments.clear();
        }
    }
}

impl<R: BufRead> Iterator for DumpReader<R> {
    type Item = Result<KbPost, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        loop {
            let row = match next_row(&mut self.posts, &mut self.buf, &mut self.diag) {
                Ok(Some(row)) => row,
                Ok(None) => {
                    self.finish();
                    return None;
                }
                Err(e) => {
                    self.finished = true;
                    return Some(Err(e));
                }
            };
            match row {
                Row::Post { id, body } => {
                    self.diag.posts_read += 1;
                    if !self.seen.insert(id) {
                        self.diag.duplicate_posts += 1;
                        continue;
                    }
                    let comments = self.comments.remove(&id);
                    let body = clean_text(&body);
                    if body.is_empty() {
                        self.diag.empty_posts += 1;
                        continue;
                    }
                    match comments {
                        Some(comments) => return Some(Ok(KbPost { post_id: id, body, comments })),
                        None => self.diag.posts_without_comments += 1,
                    }
                }
                Row::Comment { .. } | Row::Other => self.diag.malformed_records += 1,
            }
        }
    }
}
