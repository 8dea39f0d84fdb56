//! Composite reward selection: the training conditions `Fmt`, `Fmt+Acc`,
//! `Rubric`, `ASM`, `Fmt+Acc+ASM` and arbitrary weighted sums of the
//! component rewards, e.g. `0.5*fmt + 2*acc`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use std::collections::BTreeSet;

use image::RgbImage;

use crate::attention::{attn_reward_for_rollout, AttentionCapture, GroundingOptions};
use crate::dataset::Problem;
use crate::error::{contract, Error, Result};
use crate::judge::{AggregatedVerdict, JudgeClient};
use crate::rule_rewards::{
    mcq_accuracy_reward, principle_overlap_reward, rubric_reward, unit_consistency_reward,
    AnswerFormat, GoldLabels, RubricComponents, RubricScore, Stopwords,
};
use crate::structured_output::{format_reward, parse_structured_response, Completion, ParsedResponse, Tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Fmt,
    Acc,
    Rubric,
    Asm,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Fmt => "fmt",
            Component::Acc => "acc",
            Component::Rubric => "rubric",
            Component::Asm => "asm",
        }
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fmt" | "format" => Ok(Component::Fmt),
            "acc" | "accuracy" => Ok(Component::Acc),
            "rubric" | "rub" => Ok(Component::Rubric),
            "asm" | "attn" => Ok(Component::Asm),
            other => contract(format!("unknown reward component {other:?} (fmt, acc, rubric, asm)")),
        }
    }
}

/// Component reward values available for one completion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentValues {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fmt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rubric: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asm: Option<f64>,
}

impl ComponentValues {
    pub fn get(&self, c: Component) -> Option<f64> {
        match c {
            Component::Fmt => self.fmt,
            Component::Acc => self.acc,
            Component::Rubric => self.rubric,
            Component::Asm => self.asm,
        }
    }
}

/// A weighted sum of components. The named training conditions are the
/// unit-weight sums of their components.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSelector {
    terms: Vec<(Component, f64)>,
}

impl RewardSelector {
    pub const CONDITIONS: [&'static str; 5] = ["Fmt", "Fmt+Acc", "Rubric", "ASM", "Fmt+Acc+ASM"];

    pub fn new(terms: Vec<(Component, f64)>) -> Result<Self> {
        if terms.is_empty() {
            return contract("reward selector needs at least one component");
        }
        for (c, w) in &terms {
            if !w.is_finite() {
                return contract(format!("weight for {} is not finite", c.name()));
            }
        }
        Ok(Self { terms })
    }

    pub fn single(c: Component) -> Self {
        Self { terms: vec![(c, 1.0)] }
    }

    pub fn terms(&self) -> &[(Component, f64)] {
        &self.terms
    }

    pub fn components(&self) -> impl Iterator<Item = Component> + '_ {
        self.terms.iter().map(|(c, _)| *c)
    }

    pub fn uses(&self, c: Component) -> bool {
        self.terms.iter().any(|(t, _)| *t == c)
    }

    /// Weighted sum; errors when a selected component was not computed.
    pub fn combine(&self, values: &ComponentValues) -> Result<f64> {
        let mut total = 0.0;
        for (c, w) in &self.terms {
            let v = values
                .get(*c)
                .ok_or_else(|| Error::Contract(format!("reward component {} not available", c.name())))?;
            total += w * v;
        }
        Ok(total)
    }

    /// Canonical condition name when the selector is one, else the weighted form.
    pub fn name(&self) -> String {
        let unit = self.terms.iter().all(|(_, w)| *w == 1.0);
        let names: Vec<&str> = self.terms.iter().map(|(c, _)| c.name()).collect();
        if unit {
            let canon = match names.as_slice() {
                ["fmt"] => Some("Fmt"),
                ["fmt", "acc"] => Some("Fmt+Acc"),
                ["rubric"] => Some("Rubric"),
                ["asm"] => Some("ASM"),
                ["fmt", "acc", "asm"] => Some("Fmt+Acc+ASM"),
                _ => None,
            };
            if let Some(n) = canon {
                return n.to_string();
            }
        }
        self.terms
            .iter()
            .map(|(c, w)| format!("{w}*{}", c.name()))
            .collect::<Vec<_>>()
            .join("+")
    }
}

impl FromStr for RewardSelector {
    type Err = Error;

    /// Accepts `fmt+acc`, `Fmt+Acc+ASM`, `0.5*fmt + 2*asm`, `rubric`, ...
    fn from_str(s: &str) -> Result<Self> {
        let mut terms = Vec::new();
        for part in s.split('+') {
            let part = part.trim();
            if part.is_empty() {
                return contract(format!("empty term in reward selector {s:?}"));
            }
            let (w, name) = match part.split_once('*') {
                Some((w, name)) => {
                    let w: f64 = w
                        .trim()
                        .parse()
                        .map_err(|_| Error::Contract(format!("bad weight {w:?} in {s:?}")))?;
                    (w, name)
                }
                None => (1.0, part),
            };
            let c: Component = name.parse()?;
            if terms.iter().any(|(t, _)| *t == c) {
                return contract(format!("component {} repeated in {s:?}", c.name()));
            }
            terms.push((c, w));
        }
        Self::new(terms)
    }
}

impl fmt::Display for RewardSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl Serialize for RewardSelector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for RewardSelector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Rule-based rubric components for a multiple-choice completion.
pub fn mcq_rubric_components(
    parsed: &ParsedResponse,
    gold: &GoldLabels,
    completion: &Completion,
    stopwords: &Stopwords,
) -> Result<RubricComponents> {
    if gold.format != AnswerFormat::Mcq {
        return contract("rule-based rubric needs MCQ gold labels");
    }
    Ok(RubricComponents {
        r_a: mcq_accuracy_reward(parsed, gold)?,
        r_p: principle_overlap_reward(parsed.content(Tag::Principle), &gold.principle, stopwords),
        r_u: unit_consistency_reward(parsed.content(Tag::Unit), &gold.unit),
        r_reason: 0.0,
        r_f: format_reward(parsed),
        char_length: completion.char_length(),
        format: AnswerFormat::Mcq,
        has_reasoning_trace: parsed.has_reasoning(),
    })
}

/// Rubric inputs and result for one completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricDetail {
    pub components: RubricComponents,
    pub result: RubricScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingSummary {
    pub asm: f64,
    pub entropy: f64,
    pub per_token: Vec<f64>,
}

/// Every reward computed for one completion, and the selected combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub problem_id: String,
    pub format: AnswerFormat,
    pub tags_present: BTreeSet<Tag>,
    pub char_length: usize,
    pub token_count: usize,
    pub values: ComponentValues,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rubric: Option<RubricDetail>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jury: Option<AggregatedVerdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grounding: Option<GroundingSummary>,
    pub condition: String,
    pub combined: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ScoreOptions {
    pub stopwords: Stopwords,
    pub grounding: GroundingOptions,
}

/// Attention captures for a completion and the image it was conditioned on.
pub struct GroundingInput<'a> {
    pub captures: &'a [AttentionCapture],
    pub image: &'a RgbImage,
}

/// Scores one completion. Open-ended accuracy and rubric come from one jury
/// run, issued only when the selector needs either; ASM is computed whenever
/// captures are supplied.
pub fn score_completion(
    problem: &Problem,
    completion: &Completion,
    grounding: Option<GroundingInput<'_>>,
    selector: &RewardSelector,
    client: &JudgeClient,
    opts: &ScoreOptions,
) -> Result<RewardBreakdown> {
    let parsed = parse_structured_response(completion);
    let gold = &problem.gold;
    let mut values = ComponentValues {
        fmt: Some(format_reward(&parsed)),
        ..Default::default()
    };
    let mut jury = None;
    let rubric_components = match gold.format {
        AnswerFormat::Mcq => Some(mcq_rubric_components(&parsed, gold, completion, &opts.stopwords)?),
        AnswerFormat::Oe if selector.uses(Component::Acc) || selector.uses(Component::Rubric) => {
            let (agg, _) = client.judge_oe_rubric(&problem.question, Some(&problem.image_path), &parsed, gold)?;
            let c = RubricComponents {
                r_a: agg.r_a,
                r_p: agg.r_p,
                r_u: agg.r_u,
                r_reason: agg.r_reason,
                r_f: format_reward(&parsed),
                char_length: completion.char_length(),
                format: AnswerFormat::Oe,
                has_reasoning_trace: parsed.has_reasoning(),
            };
            jury = Some(agg);
            Some(c)
        }
        AnswerFormat::Oe => None,
    };
    let rubric = match rubric_components {
        Some(components) => {
            values.acc = Some(components.r_a);
            let result = rubric_reward(&components)?;
            values.rubric = Some(result.score);
            Some(RubricDetail { components, result })
        }
        None => None,
    };
    let grounding = match grounding {
        Some(g) => {
            let scores = attn_reward_for_rollout(g.captures, g.image, opts.grounding)?;
            values.asm = Some(scores.asm);
            Some(GroundingSummary {
                asm: scores.asm,
                entropy: scores.entropy,
                per_token: scores.per_token,
            })
        }
        None => None,
    };
    if selector.uses(Component::Asm) && grounding.is_none() {
        return contract(format!(
            "problem {}: condition {} needs attention captures",
            problem.id,
            selector.name()
        ));
    }
    let combined = selector.combine(&values)?;
    Ok(RewardBreakdown {
        problem_id: problem.id.clone(),
        format: gold.format,
        tags_present: parsed.tags_present.clone(),
        char_length: completion.char_length(),
        token_count: completion.token_count,
        values,
        rubric,
        jury,
        grounding,
        condition: selector.name(),
        combined,
    })
}
