//! Minimal template language with strict named placeholders.
//!
//! `{name}` is a placeholder, `{{` and `}}` are literal braces. Every
//! placeholder must be known to the caller and bound at render time;
//! substituted values are inserted verbatim and never re-scanned.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unknown placeholder {{{name}}}")]
    UnknownPlaceholder { name: String },
    #[error("placeholder {{{name}}} is required but missing")]
    MissingPlaceholder { name: String },
    #[error("placeholder {{{name}}} appears more than once")]
    DuplicatePlaceholder { name: String },
    #[error("placeholders out of order: expected {expected:?}, found {found:?}")]
    Order { expected: Vec<String>, found: Vec<String> },
    #[error("unbalanced brace at byte {offset}")]
    UnbalancedBrace { offset: usize },
    #[error("no value bound for placeholder {{{name}}}")]
    Unbound { name: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

/// Byte `(offset, length)` of each substituted placeholder, by name.
pub type PlaceholderSpans = BTreeMap<String, (usize, usize)>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    segments: Vec<Segment>,
}

impl Template {
    /// Parses `text`, accepting only placeholders listed in `allowed`.
    pub fn parse(text: &str, allowed: &[&str]) -> Result<Self, TemplateError> {
        let mut segments = Vec::new();
        let mut literal = String::new();
        let bytes = text.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            match bytes[i] {
                b'{' if bytes.get(i + 1) == Some(&b'{') => {
                    literal.push('{');
                    i += 2;
                }
                b'}' if bytes.get(i + 1) == Some(&b'}') => {
                    literal.push('}');
                    i += 2;
                }
                b'{' => {
                    let close = text[i + 1..]
                        .find('}')
                        .ok_or(TemplateError::UnbalancedBrace { offset: i })?;
                    let name = &text[i + 1..i + 1 + close];
                    if name.is_empty() || !name.bytes().all(|b| b.is_ascii_lowercase() || b == b'_') {
                        return Err(TemplateError::UnbalancedBrace { offset: i });
                    }
                    if !allowed.contains(&name) {
                        return Err(TemplateError::UnknownPlaceholder { name: name.into() });
                    }
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(Segment::Placeholder(name.into()));
                    i += close + 2;
                }
                b'}' => return Err(TemplateError::UnbalancedBrace { offset: i }),
                _ => {
                    // copy the whole UTF-8 character
                    let ch = text[i..].chars().next().expect("in bounds");
                    literal.push(ch);
                    i += ch.len_utf8();
                }
            }
        }
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Ok(Self { segments })
    }

    /// Placeholder names in order of appearance.
    pub fn placeholders(&self) -> Vec<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Placeholder(n) => Some(n.as_str()),
                Segment::Literal(_) => None,
            })
            .collect()
    }

    /// Requires every name in `required` to appear exactly once, and the
    /// names in `ordered` to appear in that relative order.
    pub fn require(&self, required: &[&str], ordered: &[&str]) -> Result<(), TemplateError> {
        let names = self.placeholders();
        for name in &names {
            if names.iter().filter(|n| *n == name).count() > 1 {
                return Err(TemplateError::DuplicatePlaceholder { name: (*name).into() });
            }
        }
        for name in required {
            if !names.contains(name) {
                return Err(TemplateError::MissingPlaceholder { name: (*name).into() });
            }
        }
        let found: Vec<&str> = names.iter().copied().filter(|n| ordered.contains(n)).collect();
        if found != ordered {
            return Err(TemplateError::Order {
                expected: ordered.iter().map(|s| s.to_string()).collect(),
                found: found.iter().map(|s| s.to_string()).collect(),
            });
        }
        Ok(())
    }

    /// Renders the template, returning the text and the byte span
    /// `(offset, length)` of each substituted placeholder.
    pub fn render(&self, values: &BTreeMap<&str, &str>) -> Result<(String, PlaceholderSpans), TemplateError> {
        let mut out = String::new();
        let mut spans = BTreeMap::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(l) => out.push_str(l),
                Segment::Placeholder(name) => {
                    let value = values
                        .get(name.as_str())
                        .ok_or_else(|| TemplateError::Unbound { name: name.clone() })?;
                    spans.insert(name.clone(), (out.len(), value.len()));
                    out.push_str(value);
                }
            }
        }
        Ok((out, spans))
    }

    /// Renders with no span bookkeeping.
    pub fn fill(&self, values: &BTreeMap<&str, &str>) -> Result<String, TemplateError> {
        self.render(values).map(|(s, _)| s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vals<'a>(pairs: &[(&'a str, &'a str)]) -> BTreeMap<&'a str, &'a str> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn renders_with_spans() {
        let t = Template::parse("A {x} B {y}!", &["x", "y"]).unwrap();
        let (text, spans) = t.render(&vals(&[("x", "one"), ("y", "{two}")])).unwrap();
        assert_eq!(text, "A one B {two}!");
        assert_eq!(spans["x"], (2, 3));
        assert_eq!(&text[spans["y"].0..spans["y"].0 + spans["y"].1], "{two}");
    }

    #[test]
    fn escaped_braces_are_literal() {
        let t = Template::parse("{{\"grade\": {g}}}", &["g"]).unwrap();
        assert_eq!(t.fill(&vals(&[("g", "5")])).unwrap(), "{\"grade\": 5}");
    }

    #[test]
    fn strictness() {
        assert_eq!(
            Template::parse("{nope}", &["x"]).unwrap_err(),
            TemplateError::UnknownPlaceholder { name: "nope".into() }
        );
        assert!(matches!(
            Template::parse("{x", &["x"]),
            Err(TemplateError::UnbalancedBrace { .. })
        ));
        assert!(matches!(
            Template::parse("x}", &["x"]),
            Err(TemplateError::UnbalancedBrace { .. })
        ));
        assert!(matches!(
            Template::parse("{ x }", &["x"]),
            Err(TemplateError::UnbalancedBrace { .. })
        ));
        let t = Template::parse("{x}", &["x", "y"]).unwrap();
        assert_eq!(
            t.fill(&vals(&[])).unwrap_err(),
            TemplateError::Unbound { name: "x".into() }
        );
    }

    #[test]
    fn require_checks_presence_uniqueness_and_order() {
        let t = Template::parse("{a}{b}{c}", &["a", "b", "c"]).unwrap();
        assert!(t.require(&["a", "b", "c"], &["a", "b", "c"]).is_ok());
        assert!(matches!(
            t.require(&["a"], &["b", "a"]),
            Err(TemplateError::Order { .. })
        ));
        let t = Template::parse("{a}{a}", &["a"]).unwrap();
        assert!(matches!(
            t.require(&["a"], &[]),
            Err(TemplateError::DuplicatePlaceholder { .. })
        ));
        let t = Template::parse("{a}", &["a", "b"]).unwrap();
        assert!(matches!(
            t.require(&["a", "b"], &[]),
            Err(TemplateError::MissingPlaceholder { .. })
        ));
    }

    #[test]
    fn non_ascii_literals_survive() {
        let t = Template::parse("héllo {x} wörld", &["x"]).unwrap();
        assert_eq!(t.fill(&vals(&[("x", "ü")])).unwrap(), "héllo ü wörld");
    }
}
