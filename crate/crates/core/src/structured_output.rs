//! Tag-structured completion parsing and the format reward.
//!
//! Completions are expected to carry four tagged fields:
//! `<think>`, `<answer>`, `<unit>` and `<principle>`. Parsing is total:
//! a missing or malformed tag is recorded as absent, never as an error.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// One of the four structural tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Think,
    Answer,
    Unit,
    Principle,
}

impl Tag {
    /// Canonical emission order.
    pub const ALL: [Tag; 4] = [Tag::Think, Tag::Answer, Tag::Unit, Tag::Principle];

    pub fn name(self) -> &'static str {
        match self {
            Tag::Think => "think",
            Tag::Answer => "answer",
            Tag::Unit => "unit",
            Tag::Principle => "principle",
        }
    }

    pub fn open(self) -> &'static str {
        match self {
            Tag::Think => "<think>",
            Tag::Answer => "<answer>",
            Tag::Unit => "<unit>",
            Tag::Principle => "<principle>",
        }
    }

    pub fn close(self) -> &'static str {
        match self {
            Tag::Think => "</think>",
            Tag::Answer => "</answer>",
            Tag::Unit => "</unit>",
            Tag::Principle => "</principle>",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A raw model output together with its length measures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    /// Number of generated tokens.
    pub token_count: usize,
}

impl Completion {
    pub fn new(text: impl Into<String>, token_count: usize) -> Self {
        Self {
            text: text.into(),
            token_count,
        }
    }

    /// Wraps text whose token count is unknown; the count is taken as the
    /// number of whitespace-separated words.
    pub fn from_text(text: impl Into<String>) -> Self {
        let text = text.into();
        let token_count = text.split_whitespace().count();
        Self { text, token_count }
    }

    /// Length in characters (Unicode scalar values).
    pub fn char_length(&self) -> usize {
        self.text.chars().count()
    }
}

/// The four tagged fields extracted from a completion.
///
/// A field is `Some` exactly when its tag is in `tags_present`. Empty tag
/// content yields `Some("")`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub think: Option<String>,
    pub answer: Option<String>,
    pub unit: Option<String>,
    pub principle: Option<String>,
    pub tags_present: BTreeSet<Tag>,
}

impl ParsedResponse {
    pub fn field(&self, tag: Tag) -> Option<&str> {
        match tag {
            Tag::Think => self.think.as_deref(),
            Tag::Answer => self.answer.as_deref(),
            Tag::Unit => self.unit.as_deref(),
            Tag::Principle => self.principle.as_deref(),
        }
    }

    /// Field content, with absence mapped to the empty string.
    pub fn content(&self, tag: Tag) -> &str {
        self.field(tag).unwrap_or("")
    }

    pub fn set(&mut self, tag: Tag, value: impl Into<String>) {
        let value = Some(value.into());
        match tag {
            Tag::Think => self.think = value,
            Tag::Answer => self.answer = value,
            Tag::Unit => self.unit = value,
            Tag::Principle => self.principle = value,
        }
        self.tags_present.insert(tag);
    }

    pub fn has(&self, tag: Tag) -> bool {
        self.tags_present.contains(&tag)
    }

    /// True when `<think>` is present with non-blank content.
    pub fn has_reasoning(&self) -> bool {
        self.think.as_deref().is_some_and(|t| !t.trim().is_empty())
    }

    /// Emits the present fields as `<tag>content</tag>` in canonical order.
    pub fn to_tagged_string(&self) -> String {
        let mut out = String::new();
        for tag in Tag::ALL {
            if let Some(content) = self.field(tag) {
                out.push_str(tag.open());
                out.push_str(content);
                out.push_str(tag.close());
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct Marker {
    tag: Tag,
    closing: bool,
    start: usize,
    end: usize,
}

fn scan_markers(text: &str) -> Vec<Marker> {
    let bytes = text.as_bytes();
    let mut markers = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'<' {
            let rest = &text[i..];
            let hit = Tag::ALL.iter().find_map(|&tag| {
                if rest.starts_with(tag.open()) {
                    Some((tag, false, tag.open().len()))
                } else if rest.starts_with(tag.close()) {
                    Some((tag, true, tag.close().len()))
                } else {
                    None
                }
            });
            if let Some((tag, closing, len)) = hit {
                markers.push(Marker {
                    tag,
                    closing,
                    start: i,
                    end: i + len,
                });
                i += len;
                continue;
            }
        }
        i += 1;
    }
    markers
}

/// Extracts the four tagged fields from a completion.
///
/// Markers are scanned left to right. An opening tag is paired with the next
/// marker of the same name when that marker is a closing tag; otherwise the
/// opening is treated as unclosed and skipped, so the innermost pair wins.
/// Everything inside a matched pair is skipped, so tags restated inside
/// `<think>` do not shadow later top-level tags. The first top-level pair per
/// tag name wins.
pub fn parse_structured_response(completion: &Completion) -> ParsedResponse {
    parse_text(&completion.text)
}

/// [`parse_structured_response`] over a bare string.
pub fn parse_text(text: &str) -> ParsedResponse {
    let markers = scan_markers(text);
    let mut found: [Option<&str>; 4] = [None; 4];
    let mut i = 0;
    while i < markers.len() {
        let m = markers[i];
        if m.closing {
            i += 1;
            continue;
        }
        let next_same = markers
            .iter()
            .enumerate()
            .skip(i + 1)
            .find(|(_, n)| n.tag == m.tag);
        match next_same {
            Some((j, n)) if n.closing => {
                let slot = &mut found[m.tag.index()];
                if slot.is_none() {
                    *slot = Some(text[m.end..n.start].trim());
                }
                i = j + 1;
            }
            // unclosed, or shadowed by a later opening of the same name
            _ => i += 1,
        }
    }

    let mut parsed = ParsedResponse::default();
    for tag in Tag::ALL {
        if let Some(content) = found[tag.index()] {
            parsed.set(tag, content);
        }
    }
    parsed
}

/// Fraction of the four tags present: |tags_present| / 4.
pub fn format_reward(parsed: &ParsedResponse) -> f64 {
    parsed.tags_present.len() as f64 / 4.0
}
