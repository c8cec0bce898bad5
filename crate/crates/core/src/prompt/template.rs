//! Minimal template language.
//!
//! `{name}` is replaced by the binding `name`. A block
//! `{#name}` ... `{/name}` (each marker on its own line) is kept only when
//! `name` is bound to a non-empty value. Any other brace is literal.
//! Substituted values are never rescanned.

use std::collections::{BTreeMap, BTreeSet};

use super::PromptError;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Part {
    Lit(String),
    Var(String),
    Section { name: String, body: Vec<Part> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    parts: Vec<Part>,
}

fn ident_at(s: &str) -> Option<(char, &str, usize)> {
    // s starts with '{'
    let rest = &s[1..];
    let (sigil, body) = match rest.chars().next()? {
        c @ ('#' | '/') => (c, &rest[1..]),
        _ => (' ', rest),
    };
    let end = body.find('}')?;
    let ident = &body[..end];
    if ident.is_empty() || !ident.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_') {
        return None;
    }
    let consumed = 1 + if sigil == ' ' { 0 } else { 1 } + end + 1;
    Some((sigil, ident, consumed))
}

impl Template {
    pub fn parse(name: &str, source: &str) -> Result<Self, PromptError> {
        let bad = |msg: String| PromptError::Template { name: name.to_string(), message: msg };
        let mut stack: Vec<(String, Vec<Part>)> = vec![(String::new(), Vec::new())];
        let mut lit = String::new();
        let mut i = 0;
        while i < source.len() {
            let rest = &source[i..];
            if rest.starts_with('{') {
                if let Some((sigil, ident, used)) = ident_at(rest) {
                    let mut used = used;
                    if sigil != ' ' && source[i + used..].starts_with('\n') {
                        used += 1;
                    }
                    let top = &mut stack.last_mut().expect("root").1;
                    if !lit.is_empty() {
                        top.push(Part::Lit(std::mem::take(&mut lit)));
                    }
                    match sigil {
                        '#' => stack.push((ident.to_string(), Vec::new())),
                        '/' => {
                            let (open, body) = stack.pop().filter(|(n, _)| !n.is_empty()).ok_or_else(|| {
                                bad(format!("unmatched section close `{ident}`"))
                            })?;
                            if open != ident {
                                return Err(bad(format!("section `{open}` closed by `{ident}`")));
                            }
                            stack.last_mut().expect("root").1.push(Part::Section { name: open, body });
                        }
                        _ => top.push(Part::Var(ident.to_string())),
                    }
                    i += used;
                    continue;
                }
            }
            let c = rest.chars().next().expect("non-empty");
            lit.push(c);
            i += c.len_utf8();
        }
        if !lit.is_empty() {
            stack.last_mut().expect("root").1.push(Part::Lit(lit));
        }
        if stack.len() != 1 {
            return Err(bad(format!("section `{}` never closed", stack.last().unwrap().0)));
        }
        Ok(Self { name: name.to_string(), parts: stack.pop().unwrap().1 })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// All variable names referenced anywhere in the template.
    pub fn placeholders(&self) -> BTreeSet<String> {
        fn walk(parts: &[Part], out: &mut BTreeSet<String>) {
            for p in parts {
                match p {
                    Part::Var(v) => {
                        out.insert(v.clone());
                    }
                    Part::Section { name, body } => {
                        out.insert(name.clone());
                        walk(body, out);
                    }
                    Part::Lit(_) => {}
                }
            }
        }
        let mut out = BTreeSet::new();
        walk(&self.parts, &mut out);
        out
    }

    /// Number of `{name}` occurrences (sections excluded).
    pub fn var_count(&self) -> usize {
        fn walk(parts: &[Part]) -> usize {
            parts
                .iter()
                .map(|p| match p {
                    Part::Var(_) => 1,
                    Part::Section { body, .. } => walk(body),
                    Part::Lit(_) => 0,
                })
                .sum()
        }
        walk(&self.parts)
    }

    /// Render with every placeholder bound. Unused bindings are an error
    /// too, so a caller cannot silently drop a value.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<String, PromptError> {
        let wanted = self.placeholders();
        for name in &wanted {
            if !bindings.contains_key(name) {
                return Err(PromptError::Unbound { template: self.name.clone(), name: name.clone() });
            }
        }
        if let Some(extra) = bindings.keys().find(|k| !wanted.contains(*k) && !k.starts_with("truncation.")) {
            return Err(PromptError::Template {
                name: self.name.clone(),
                message: format!("binding `{extra}` has no placeholder"),
            });
        }
        fn emit(parts: &[Part], b: &BTreeMap<String, String>, out: &mut String) {
            for p in parts {
                match p {
                    Part::Lit(s) => out.push_str(s),
                    Part::Var(v) => out.push_str(&b[v]),
                    Part::Section { name, body } => {
                        if !b[name].is_empty() {
                            emit(body, b, out);
                        }
                    }
                }
            }
        }
        let mut out = String::new();
        emit(&self.parts, bindings, &mut out);
        let trimmed = out.trim_end().len();
        out.truncate(trimmed);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn substitution_is_single_pass() {
        let t = Template::parse("t", "a {x} b").unwrap();
        assert_eq!(t.render(&b(&[("x", "{x} {'k': 1}")])).unwrap(), "a {x} {'k': 1} b");
    }

    #[test]
    fn literal_braces_survive() {
        let t = Template::parse("t", "d = {'a': 1} {Name} {x}").unwrap();
        assert_eq!(t.placeholders().len(), 1);
        assert_eq!(t.render(&b(&[("x", "1")])).unwrap(), "d = {'a': 1} {Name} 1");
    }

    #[test]
    fn section_toggles() {
        let t = Template::parse("t", "head\n\n{#s}\ntips:\n{s}\n{/s}\n").unwrap();
        assert_eq!(t.render(&b(&[("s", "do X")])).unwrap(), "head\n\ntips:\ndo X");
        assert_eq!(t.render(&b(&[("s", "")])).unwrap(), "head");
    }

    #[test]
    fn unbound_and_unbalanced() {
        let t = Template::parse("t", "{a}{b}").unwrap();
        assert!(matches!(t.render(&b(&[("a", "1")])), Err(PromptError::Unbound { .. })));
        assert!(Template::parse("t", "{#a}x").is_err());
        assert!(Template::parse("t", "x{/a}").is_err());
        assert!(Template::parse("t", "{#a}x{/b}").is_err());
    }
}
