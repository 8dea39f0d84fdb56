//! Shipped prompt templates and slot rendering.
//!
//! Templates use `{name}` for slots and `{{` / `}}` for literal braces.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Version tag of the shipped prompt set.
pub const PROMPT_SET_VERSION: &str = "prompts-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptId {
    /// Rubric-condition generation prompt for MCQ.
    RubricMcqa,
    /// Rubric-condition generation prompt for open-ended questions.
    RubricOe,
    OeSystem,
    McqaSystem,
    /// Maps a raw label onto one ontology category.
    PrincipleMapping,
    /// Clusters a batch of raw labels into an ontology.
    OntologyCreation,
    /// Extracts principle and unit type from a problem.
    UnitExtract,
    /// Answer-equivalence judge.
    McqaJudge,
    /// Four-dimension rubric judge for open-ended responses. Reconstructed
    /// wording; the layout of the reply is fixed by [`crate::judge::parse_verdict`].
    OeRubricJudge,
}

impl PromptId {
    pub const ALL: [PromptId; 9] = [
        PromptId::RubricMcqa,
        PromptId::RubricOe,
        PromptId::OeSystem,
        PromptId::McqaSystem,
        PromptId::PrincipleMapping,
        PromptId::OntologyCreation,
        PromptId::UnitExtract,
        PromptId::McqaJudge,
        PromptId::OeRubricJudge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptId::RubricMcqa => "rubric_mcqa",
            PromptId::RubricOe => "rubric_oe",
            PromptId::OeSystem => "oe_system",
            PromptId::McqaSystem => "mcqa_system",
            PromptId::PrincipleMapping => "principle_mapping",
            PromptId::OntologyCreation => "ontology_creation",
            PromptId::UnitExtract => "unit_extract",
            PromptId::McqaJudge => "mcqa_judge",
            PromptId::OeRubricJudge => "oe_rubric_judge",
        }
    }

    /// Raw template text.
    pub fn template(self) -> &'static str {
        let raw = match self {
            PromptId::RubricMcqa => include_str!("../../data/prompts/rubric_mcqa.txt"),
            PromptId::RubricOe => include_str!("../../data/prompts/rubric_oe.txt"),
            PromptId::OeSystem => include_str!("../../data/prompts/oe_system.txt"),
            PromptId::McqaSystem => include_str!("../../data/prompts/mcqa_system.txt"),
            PromptId::PrincipleMapping => include_str!("../../data/prompts/principle_mapping.txt"),
            PromptId::OntologyCreation => include_str!("../../data/prompts/ontology_creation.txt"),
            PromptId::UnitExtract => include_str!("../../data/prompts/unit_extract.txt"),
            PromptId::McqaJudge => include_str!("../../data/prompts/mcqa_judge.txt"),
            PromptId::OeRubricJudge => include_str!("../../data/prompts/oe_rubric_judge.txt"),
        };
        raw.strip_suffix('\n').unwrap_or(raw)
    }

    /// Slot names referenced by the template, in first-use order.
    pub fn slots(self) -> Vec<String> {
        let mut out = Vec::new();
        for piece in tokenize(self.template()).expect("shipped templates are well-formed") {
            if let Piece::Slot(name) = piece {
                if !out.iter().any(|n| n == name) {
                    out.push(name.to_string());
                }
            }
        }
        out
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptId::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Contract(format!("unknown prompt template {s:?}")))
    }
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn tokenize(template: &str) -> Result<Vec<Piece<'_>>> {
    let mut pieces = Vec::new();
    let bytes = template.as_bytes();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                pieces.push(Piece::Text(&template[start..i]));
                pieces.push(Piece::Text("{"));
                i += 2;
                start = i;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                pieces.push(Piece::Text(&template[start..i]));
                pieces.push(Piece::Text("}"));
                i += 2;
                start = i;
            }
            b'{' => {
                let Some(len) = template[i + 1..].find('}') else {
                    return contract(format!("unterminated slot at byte {i}"));
                };
                let name = &template[i + 1..i + 1 + len];
                if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
                    return contract(format!("invalid slot name {name:?}"));
                }
                pieces.push(Piece::Text(&template[start..i]));
                pieces.push(Piece::Slot(name));
                i += len + 2;
                start = i;
            }
            _ => i += 1,
        }
    }
    pieces.push(Piece::Text(&template[start..]));
    Ok(pieces)
}

/// Renders a template string, substituting every slot.
pub fn render_template(template: &str, slots: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    for piece in tokenize(template)? {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(name) => match slots.get(name) {
                Some(v) => out.push_str(v),
                None => return contract(format!("missing prompt slot {{{name}}}")),
            },
        }
    }
    Ok(out)
}

/// Renders a shipped prompt with the given slots.
pub fn render_prompt(id: PromptId, slots: &BTreeMap<String, String>) -> Result<String> {
    render_template(id.template(), slots)
}

/// Convenience for building slot maps from pairs.
pub fn slots<const N: usize>(pairs: [(&str, &str); N]) -> BTreeMap<String, String> {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}
