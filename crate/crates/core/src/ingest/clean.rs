//! Text cleansing for forum posts and comments.
//!
//! Markup tags are removed, character entities decoded and whitespace runs
//! collapsed to a single space. Code spans are carried through untouched:
//! HTML `<pre>`/`<code>` blocks are rewritten to backtick fences (inline
//! spans keep single backticks), existing fences and backtick spans are
//! kept as they are, and indented blocks are wrapped in a fence.
//!
//! The cleaner is applied until its output stops changing, which makes it
//! idempotent.

use std::borrow::Cow;
use std::sync::LazyLock;

use regex::Regex;

static TAG: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?s)<!--.*?-->|</?[A-Za-z][A-Za-z0-9]*(?:\s[^<>]*)?/?>").unwrap()
});
static PRE_OPEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^<pre(?:\s[^<>]*)?>(?:<code(?:\s[^<>]*)?>)?").unwrap());
static CODE_OPEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^<code(?:\s[^<>]*)?>").unwrap());
static ENTITY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"&(#[0-9]{1,7}|#[xX][0-9a-fA-F]{1,6}|[a-zA-Z]{2,8});").unwrap());

const MAX_PASSES: usize = 16;

pub fn clean_text(raw: &str) -> String {
    let mut current = clean_pass(raw);
    for _ in 1..MAX_PASSES {
        let next = clean_pass(&current);
        if next == current {
            break;
        }
        current = next;
    }
    current
}

enum Segment<'a> {
    Text(&'a str),
    Code(Cow<'a, str>),
}

fn clean_pass(input: &str) -> String {
    let mut out = String::with_capacity(input.len());
    for seg in split_segments(input) {
        match seg {
            Segment::Text(t) => out.push_str(&clean_prose(t)),
            Segment::Code(c) => out.push_str(&c),
        }
    }
    out.trim().to_string()
}

fn clean_prose(text: &str) -> String {
    let mut s = decode_entities(text).into_owned();
    loop {
        let stripped = TAG.replace_all(&s, "");
        if stripped == s {
            break;
        }
        s = stripped.into_owned();
    }
    collapse_whitespace(&s)
}

fn collapse_whitespace(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut in_ws = false;
    for c in s.chars() {
        if c.is_whitespace() {
            if !in_ws {
                out.push(' ');
            }
            in_ws = true;
        } else {
            out.push(c);
            in_ws = false;
        }
    }
    out
}

pub fn decode_entities(s: &str) -> Cow<'_, str> {
    ENTITY.replace_all(s, |caps: &regex::Captures| {
        let name = &caps[1];
        let decoded = if let Some(hex) = name.strip_prefix("#x").or_else(|| name.strip_prefix("#X")) {
            u32::from_str_radix(hex, 16).ok().and_then(char::from_u32)
        } else if let Some(dec) = name.strip_prefix('#') {
            dec.parse::<u32>().ok().and_then(char::from_u32)
        } else {
            match name {
                "lt" => Some('<'),
                "gt" => Some('>'),
                "amp" => Some('&'),
                "quot" => Some('"'),
                "apos" => Some('\''),
                "nbsp" => Some(' '),
                "ndash" => Some('\u{2013}'),
                "mdash" => Some('\u{2014}'),
                "hellip" => Some('\u{2026}'),
                _ => None,
            }
        };
        match decoded {
            Some(c) => c.to_string(),
            None => caps[0].to_string(),
        }
    })
}

fn split_segments(s: &str) -> Vec<Segment<'_>> {
    let bytes = s.as_bytes();
    let mut segs = Vec::new();
    let mut text_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        let found = match bytes[i] {
            b'<' => html_code(s, i),
            b'`' => backtick_code(s, i),
            b' ' | b'\t' if at_block_start(s, i) => indented_code(s, i),
            _ => None,
        };
        if let Some((end, code)) = found {
            if text_start < i {
                segs.push(Segment::Text(&s[text_start..i]));
            }
            segs.push(Segment::Code(code));
            i = end;
            text_start = end;
        } else {
            i += 1;
        }
    }
    if text_start < bytes.len() {
        segs.push(Segment::Text(&s[text_start..]));
    }
    segs
}

fn fence(content: &str) -> Cow<'static, str> {
    Cow::Owned(format!("```\n{content}\n```"))
}

fn html_code(s: &str, i: usize) -> Option<(usize, Cow<'_, str>)> {
    let rest = &s[i..];
    if let Some(m) = PRE_OPEN.find(rest) {
        let body_start = i + m.end();
        let close = s[body_start..].find("</pre>")?;
        let mut content = &s[body_start..body_start + close];
        if let Some(c) = content.strip_suffix("</code>") {
            content = c;
        }
        return Some((body_start + close + "</pre>".len(), fence(content)));
    }
    if let Some(m) = CODE_OPEN.find(rest) {
        let body_start = i + m.end();
        let close = s[body_start..].find("</code>")?;
        let content = &s[body_start..body_start + close];
        let end = body_start + close + "</code>".len();
        if content.contains('\n') || content.contains('`') {
            return Some((end, fence(content)));
        }
        return Some((end, Cow::Owned(format!("`{content}`"))));
    }
    None
}

fn backtick_code(s: &str, i: usize) -> Option<(usize, Cow<'_, str>)> {
    let rest = &s[i..];
    if rest.starts_with("```") {
        let line_end = i + rest.find('\n')?;
        if s[i + 3..line_end].contains('`') {
            return None;
        }
        let close = s[line_end..].find("\n```")?;
        let end = line_end + close + 4;
        return Some((end, Cow::Borrowed(&s[i..end])));
    }
    let after = &rest[1..];
    if after.starts_with('`') {
        return None;
    }
    let close = after.find(['`', '\n'])?;
    if after.as_bytes()[close] != b'`' || close == 0 {
        return None;
    }
    let end = i + 1 + close + 1;
    Some((end, Cow::Borrowed(&s[i..end])))
}

fn at_block_start(s: &str, i: usize) -> bool {
    if i == 0 {
        return true;
    }
    if s.as_bytes()[i - 1] != b'\n' {
        return false;
    }
    // Previous line must be blank.
    let before = &s[..i - 1];
    let prev_line = match before.rfind('\n') {
        Some(p) => &before[p + 1..],
        None => before,
    };
    prev_line.trim().is_empty()
}

fn is_indented(line: &str) -> bool {
    (line.starts_with("    ") || line.starts_with('\t')) && !line.trim().is_empty()
}

fn indented_code(s: &str, i: usize) -> Option<(usize, Cow<'_, str>)> {
    let mut end = i;
    for line in s[i..].split_inclusive('\n') {
        if !is_indented(line) {
            break;
        }
        end += line.len();
    }
    if end == i {
        return None;
    }
    let content = s[i..end].strip_suffix('\n').unwrap_or(&s[i..end]);
    Some((i + content.len(), fence(content)))
}
