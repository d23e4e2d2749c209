//! Codec between `(translation, spans)` and the inline tagged form
//!
//! ```text
//! Alle trugen <error1 severity="major">Lawinenschilder</error1>.
//! ```
//!
//! Text content is escaped (`&`, `<`, `>`) so literal angle brackets in a
//! translation never collide with tags. Tags are numbered from 1 in span
//! order at serialization time.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{validate_spans, ErrorSpan, Severity};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MarkupError {
    #[error("invalid spans: {}", .0.join("; "))]
    InvalidSpans(Vec<String>),
    #[error("malformed markup at character {position}: {kind}")]
    Malformed { position: usize, kind: MalformedKind },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MalformedKind {
    Unclosed { tag: u32 },
    Nested { outer: u32, inner: u32 },
    UnexpectedClose { tag: u32 },
    MismatchedClose { open: u32, close: u32 },
    MissingSeverity { tag: u32 },
    UnknownSeverity { tag: u32, value: String },
    BadAttribute(String),
    BadTagNumber,
    EmptyContent { tag: u32 },
}

impl fmt::Display for MalformedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MalformedKind::Unclosed { tag } => write!(f, "unclosed tag error{tag}"),
            MalformedKind::Nested { outer, inner } => {
                write!(f, "tag error{inner} nested inside error{outer}")
            }
            MalformedKind::UnexpectedClose { tag } => {
                write!(f, "closing tag error{tag} without an open tag")
            }
            MalformedKind::MismatchedClose { open, close } => {
                write!(f, "closing tag error{close} does not match open tag error{open}")
            }
            MalformedKind::MissingSeverity { tag } => {
                write!(f, "tag error{tag} has no severity attribute")
            }
            MalformedKind::UnknownSeverity { tag, value } => {
                write!(f, "tag error{tag} has unknown severity {value:?}")
            }
            MalformedKind::BadAttribute(detail) => write!(f, "bad attribute syntax: {detail}"),
            MalformedKind::BadTagNumber => f.write_str("tag name must be error followed by a number"),
            MalformedKind::EmptyContent { tag } => write!(f, "tag error{tag} encloses no text"),
        }
    }
}

/// A translation with inline error tags.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MarkedTranslation(String);

impl MarkedTranslation {
    pub fn new(marked: impl Into<String>) -> Self {
        Self(marked.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for MarkedTranslation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Result of [`parse_marked`]: the plain translation, its spans and any
/// tolerated irregularities (numbering gaps, stray `<`, unknown attributes).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedMarkup {
    pub translation: String,
    pub spans: Vec<ErrorSpan>,
    pub diagnostics: Vec<String>,
}

pub fn escape_text(text: &str, out: &mut String) {
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            c => out.push(c),
        }
    }
}

pub fn serialize_marked(translation: &str, spans: &[ErrorSpan]) -> Result<MarkedTranslation, MarkupError> {
    let violations = validate_spans(translation, spans);
    if !violations.is_empty() {
        return Err(MarkupError::InvalidSpans(violations));
    }
    let mut out = String::with_capacity(translation.len() + spans.len() * 40);
    let mut chars = translation.chars();
    let mut cursor = 0;
    let mut take = |n: usize, out: &mut String| {
        let piece: String = chars.by_ref().take(n).collect();
        escape_text(&piece, out);
    };
    for (i, span) in spans.iter().enumerate() {
        let n = i + 1;
        take(span.start - cursor, &mut out);
        out.push_str(&format!("<error{n} severity=\"{}\">", span.severity));
        take(span.end - span.start, &mut out);
        out.push_str(&format!("</error{n}>"));
        cursor = span.end;
    }
    let rest: String = chars.collect();
    escape_text(&rest, &mut out);
    Ok(MarkedTranslation(out))
}

struct OpenTag {
    number: u32,
    severity: Severity,
    category: Option<String>,
    start: usize,
    position: usize,
}

struct Scanner<'a> {
    chars: &'a [char],
    pos: usize,
}

impl Scanner<'_> {
    fn starts_with(&self, pat: &str) -> bool {
        pat.chars()
            .enumerate()
            .all(|(k, p)| self.chars.get(self.pos + k) == Some(&p))
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn number(&mut self) -> Option<u32> {
        let begin = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if begin == self.pos {
            return None;
        }
        self.chars[begin..self.pos].iter().collect::<String>().parse().ok()
    }
}

fn malformed(position: usize, kind: MalformedKind) -> MarkupError {
    MarkupError::Malformed { position, kind }
}

/// Parses an opening tag whose `<error` prefix starts at `tag_pos`. On return
/// the scanner sits just past the closing `>`.
fn open_tag(
    sc: &mut Scanner<'_>,
    tag_pos: usize,
    diagnostics: &mut Vec<String>,
) -> Result<(u32, Severity, Option<String>), MarkupError> {
    sc.pos += "<error".len();
    let number = sc
        .number()
        .ok_or_else(|| malformed(tag_pos, MalformedKind::BadTagNumber))?;
    let mut severity = None;
    let mut category = None;
    loop {
        let had_ws = sc.peek().is_some_and(char::is_whitespace);
        sc.skip_ws();
        match sc.peek() {
            Some('>') => {
                sc.pos += 1;
                break;
            }
            Some(c) if had_ws && (c.is_ascii_alphabetic() || c == '_') => {
                let name_start = sc.pos;
                while sc
                    .peek()
                    .is_some_and(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
                {
                    sc.pos += 1;
                }
                let name: String = sc.chars[name_start..sc.pos].iter().collect();
                sc.skip_ws();
                if sc.peek() != Some('=') {
                    return Err(malformed(
                        sc.pos,
                        MalformedKind::BadAttribute(format!("expected '=' after {name}")),
                    ));
                }
                sc.pos += 1;
                sc.skip_ws();
                let quote = match sc.peek() {
                    Some(q @ ('"' | '\'')) => q,
                    _ => {
                        return Err(malformed(
                            sc.pos,
                            MalformedKind::BadAttribute(format!("value of {name} must be quoted")),
                        ))
                    }
                };
                sc.pos += 1;
                let value_start = sc.pos;
                while let Some(c) = sc.peek() {
                    if c == quote {
                        break;
                    }
                    if c == '<' || c == '>' {
                        return Err(malformed(
                            sc.pos,
                            MalformedKind::BadAttribute(format!("unterminated value of {name}")),
                        ));
                    }
                    sc.pos += 1;
                }
                if sc.peek() != Some(quote) {
                    return Err(malformed(
                        sc.pos,
                        MalformedKind::BadAttribute(format!("unterminated value of {name}")),
                    ));
                }
                let value: String = sc.chars[value_start..sc.pos].iter().collect();
                sc.pos += 1;
                match name.as_str() {
                    "severity" => {
                        let parsed = value.trim().to_ascii_lowercase().parse::<Severity>().map_err(|_| {
                            malformed(
                                tag_pos,
                                MalformedKind::UnknownSeverity {
                                    tag: number,
                                    value: value.clone(),
                                },
                            )
                        })?;
                        severity = Some(parsed);
                    }
                    "category" => category = Some(value),
                    other => diagnostics.push(format!("error{number}: ignored attribute {other}")),
                }
            }
            Some(c) => {
                return Err(malformed(
                    sc.pos,
                    MalformedKind::BadAttribute(format!("unexpected {c:?} in tag")),
                ));
            }
            None => return Err(malformed(tag_pos, MalformedKind::Unclosed { tag: number })),
        }
    }
    let severity = severity.ok_or_else(|| malformed(tag_pos, MalformedKind::MissingSeverity { tag: number }))?;
    Ok((number, severity, category))
}

/// Inverse of [`serialize_marked`]. Offsets are recomputed over the
/// unescaped text. Single-quoted attributes and numbering gaps are accepted.
pub fn parse_marked(marked: &str) -> Result<ParsedMarkup, MarkupError> {
    let chars: Vec<char> = marked.chars().collect();
    let mut sc = Scanner { chars: &chars, pos: 0 };
    let mut plain = String::with_capacity(marked.len());
    let mut plain_len = 0usize;
    let mut spans = Vec::new();
    let mut diagnostics = Vec::new();
    let mut open: Option<OpenTag> = None;
    let mut expected_number = 1u32;

    while let Some(c) = sc.peek() {
        let here = sc.pos;
        if c == '<' && sc.starts_with("</error") {
            sc.pos += "</error".len();
            let number = sc
                .number()
                .ok_or_else(|| malformed(here, MalformedKind::BadTagNumber))?;
            sc.skip_ws();
            if sc.peek() != Some('>') {
                return Err(malformed(
                    sc.pos,
                    MalformedKind::BadAttribute(format!("closing tag error{number} must end with '>'")),
                ));
            }
            sc.pos += 1;
            let tag = open
                .take()
                .ok_or_else(|| malformed(here, MalformedKind::UnexpectedClose { tag: number }))?;
            if tag.number != number {
                return Err(malformed(
                    here,
                    MalformedKind::MismatchedClose {
                        open: tag.number,
                        close: number,
                    },
                ));
            }
            if tag.start == plain_len {
                return Err(malformed(tag.position, MalformedKind::EmptyContent { tag: number }));
            }
            let text: String = plain.chars().skip(tag.start).collect();
            spans.push(ErrorSpan {
                start: tag.start,
                end: plain_len,
                severity: tag.severity,
                category: tag.category,
                text,
            });
        } else if c == '<' && sc.starts_with("<error") && sc.chars.get(here + 6).is_some_and(|c| c.is_ascii_digit()) {
            let (number, severity, category) = open_tag(&mut sc, here, &mut diagnostics)?;
            if let Some(outer) = &open {
                return Err(malformed(
                    here,
                    MalformedKind::Nested {
                        outer: outer.number,
                        inner: number,
                    },
                ));
            }
            if number != expected_number {
                diagnostics.push(format!(
                    "tag numbering: expected error{expected_number}, found error{number}"
                ));
            }
            expected_number = number.saturating_add(1);
            open = Some(OpenTag {
                number,
                severity,
                category,
                start: plain_len,
                position: here,
            });
        } else if c == '&' {
            let decoded = [("&amp;", '&'), ("&lt;", '<'), ("&gt;", '>')]
                .into_iter()
                .find(|(entity, _)| sc.starts_with(entity));
            match decoded {
                Some((entity, ch)) => {
                    plain.push(ch);
                    sc.pos += entity.chars().count();
                }
                None => {
                    plain.push('&');
                    sc.pos += 1;
                }
            }
            plain_len += 1;
        } else {
            if c == '<' {
                diagnostics.push(format!("unescaped '<' at character {here} kept as text"));
            }
            plain.push(c);
            plain_len += 1;
            sc.pos += 1;
        }
    }
    if let Some(tag) = open {
        return Err(malformed(tag.position, MalformedKind::Unclosed { tag: tag.number }));
    }
    Ok(ParsedMarkup {
        translation: plain,
        spans,
        diagnostics,
    })
}
