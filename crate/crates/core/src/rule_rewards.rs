//! Rule-based reward components and the weighted rubric combination.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::structured_output::{Completion, ParsedResponse, Tag};

/// Rubric weights for answer, principle, unit, reasoning and format.
pub const WEIGHT_ANSWER: f64 = 0.50;
pub const WEIGHT_PRINCIPLE: f64 = 0.15;
pub const WEIGHT_UNIT: f64 = 0.10;
pub const WEIGHT_REASONING: f64 = 0.15;
pub const WEIGHT_FORMAT: f64 = 0.10;

/// Multiplier applied when reasoning is absent.
pub const SOFT_PENALTY_FACTOR: f64 = 0.6;
/// Length penalty is `min(chars / LENGTH_PENALTY_SCALE, LENGTH_PENALTY_CAP)`.
pub const LENGTH_PENALTY_SCALE: f64 = 4000.0;
pub const LENGTH_PENALTY_CAP: f64 = 0.05;

const STOPWORDS_V1: &str = include_str!("../data/stopwords-v1.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnswerFormat {
    #[serde(rename = "MCQ", alias = "mcq")]
    Mcq,
    #[serde(rename = "OE", alias = "oe")]
    Oe,
}

/// Ground-truth labels for one problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabels {
    /// Option letter for MCQ, reference answer text for OE.
    pub answer: String,
    pub unit: String,
    pub principle: String,
    pub format: AnswerFormat,
}

impl GoldLabels {
    pub fn mcq(letter: &str, unit: &str, principle: &str) -> Self {
        Self {
            answer: letter.to_string(),
            unit: unit.to_string(),
            principle: principle.to_string(),
            format: AnswerFormat::Mcq,
        }
    }

    pub fn oe(answer: &str, unit: &str, principle: &str) -> Self {
        Self {
            answer: answer.to_string(),
            unit: unit.to_string(),
            principle: principle.to_string(),
            format: AnswerFormat::Oe,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format == AnswerFormat::Mcq && mcq_letter(&self.answer).is_none() {
            return contract(format!(
                "MCQ gold answer must be one of A-D, got {:?}",
                self.answer
            ));
        }
        Ok(())
    }
}

/// Stopword set used by the principle-overlap matcher.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stopwords {
    words: BTreeSet<String>,
}

impl Stopwords {
    /// The shipped list (`data/stopwords-v1.txt`).
    pub fn default_v1() -> Self {
        Self::parse(STOPWORDS_V1).expect("shipped stopword list is valid")
    }

    /// Parses one lowercase word per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut words = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let w = line.trim();
            if w.is_empty() || w.starts_with('#') {
                continue;
            }
            if w.chars().any(|c| c.is_uppercase()) {
                return contract(format!("stopword on line {} is not lowercase: {w:?}", n + 1));
            }
            words.insert(w.to_string());
        }
        if words.is_empty() {
            return contract("stopword list is empty");
        }
        Ok(Self { words })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let text: Vec<String> = words.into_iter().map(|w| w.as_ref().to_string()).collect();
        Self::parse(&text.join("\n"))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

impl Default for Stopwords {
    fn default() -> Self {
        Self::default_v1()
    }
}

/// Extracts an option letter from decorated forms such as `B`, `b`, `B.`,
/// `(B)` or `B:`.
pub fn mcq_letter(s: &str) -> Option<char> {
    let core = s.trim_matches(|c: char| !c.is_alphanumeric());
    let mut chars = core.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if matches!(c.to_ascii_uppercase(), 'A'..='D') => {
            Some(c.to_ascii_uppercase())
        }
        _ => None,
    }
}

/// 1 if the `<answer>` field names the gold option letter, else 0.
pub fn mcq_accuracy_reward(parsed: &ParsedResponse, gold: &GoldLabels) -> Result<f64> {
    if gold.format != AnswerFormat::Mcq {
        return contract("mcq_accuracy_reward called with open-ended gold labels");
    }
    let Some(gold_letter) = mcq_letter(&gold.answer) else {
        return contract(format!("gold answer {:?} is not an option letter", gold.answer));
    };
    let hit = parsed
        .field(Tag::Answer)
        .and_then(mcq_letter)
        .is_some_and(|c| c == gold_letter);
    Ok(if hit { 1.0 } else { 0.0 })
}

/// Lowercased alphanumeric word set.
pub fn words(s: &str) -> BTreeSet<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// 1 if predicted and gold principles share at least two non-stopword words.
pub fn principle_overlap_reward(predicted: &str, gold: &str, stopwords: &Stopwords) -> f64 {
    let p = words(predicted);
    let g = words(gold);
    let shared = p
        .intersection(&g)
        .filter(|w| !stopwords.contains(w))
        .count();
    if shared >= 2 {
        1.0
    } else {
        0.0
    }
}

/// Lowercase, trim and collapse internal whitespace.
pub fn normalize_unit(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Bidirectional substring match after normalization; when the shorter
/// string has at most two characters only an exact match counts.
pub fn unit_consistency_reward(predicted: &str, gold: &str) -> f64 {
    let p = normalize_unit(predicted);
    let g = normalize_unit(gold);
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let shorter = p.chars().count().min(g.chars().count());
    let hit = if shorter <= 2 {
        p == g
    } else {
        p.contains(&g) || g.contains(&p)
    };
    if hit {
        1.0
    } else {
        0.0
    }
}

pub fn length_penalty(completion: &Completion) -> f64 {
    length_penalty_chars(completion.char_length())
}

pub fn length_penalty_chars(chars: usize) -> f64 {
    (chars as f64 / LENGTH_PENALTY_SCALE).min(LENGTH_PENALTY_CAP)
}

/// Inputs to the rubric combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricComponents {
    pub r_a: f64,
    pub r_p: f64,
    pub r_u: f64,
    pub r_reason: f64,
    pub r_f: f64,
    pub char_length: usize,
    pub format: AnswerFormat,
    /// `<think>` present with non-blank content. Drives the MCQ soft penalty.
    pub has_reasoning_trace: bool,
}

impl RubricComponents {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                contract(format!("{name} = {v} outside [0, 1]"))
            }
        };
        let binary = |name: &str, v: f64| {
            if v == 0.0 || v == 1.0 {
                Ok(())
            } else {
                contract(format!("{name} = {v} is not 0 or 1"))
            }
        };
        unit("r_a", self.r_a)?;
        binary("r_p", self.r_p)?;
        binary("r_u", self.r_u)?;
        unit("r_reason", self.r_reason)?;
        unit("r_f", self.r_f)?;
        if self.format == AnswerFormat::Mcq && self.r_reason != 0.0 {
            return contract("r_reason must be 0 for MCQ");
        }
        Ok(())
    }

    /// Whether the ×0.6 soft penalty applies: OE when the reasoning score is
    /// zero, MCQ when the `<think>` trace is missing or blank.
    pub fn reasoning_absent(&self) -> bool {
        match self.format {
            AnswerFormat::Oe => self.r_reason == 0.0,
            AnswerFormat::Mcq => !self.has_reasoning_trace,
        }
    }

    /// Weighted sum before penalties.
    pub fn weighted_base(&self) -> f64 {
        // integer percent weights keep the all-ones case at exactly 1.0
        (50.0 * self.r_a
            + 15.0 * self.r_p
            + 10.0 * self.r_u
            + 15.0 * self.r_reason
            + 10.0 * self.r_f)
            / 100.0
    }
}

/// Result of the rubric combination with its penalty trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RubricScore {
    pub base: f64,
    pub soft_penalty_applied: bool,
    pub length_penalty: f64,
    pub score: f64,
}

/// Weighted rubric: soft penalty (×0.6) first, then the length penalty is
/// subtracted, then the result is clamped to [0, 1].
pub fn rubric_reward(components: &RubricComponents) -> Result<RubricScore> {
    components.validate()?;
    let base = components.weighted_base();
    let soft = components.reasoning_absent();
    let scaled = if soft { base * SOFT_PENALTY_FACTOR } else { base };
    let lp = length_penalty_chars(components.char_length);
    let score = (scaled - lp).clamp(0.0, 1.0);
    if !score.is_finite() {
        return Err(Error::NonFinite {
            tensor: "rubric components".into(),
        });
    }
    Ok(RubricScore {
        base,
        soft_penalty_applied: soft,
        length_penalty: lp,
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structured_output::parse_text;
    use proptest::prelude::*;

    fn answer(a: &str) -> ParsedResponse {
        parse_text(&format!("<answer>{a}</answer>"))
    }

    #[test]
    fn mcq_accuracy_cases() {
        let gold = GoldLabels::mcq("B", "N", "Newton's second law");
        assert_eq!(mcq_accuracy_reward(&answer("b"), &gold).unwrap(), 1.0);
        assert_eq!(mcq_accuracy_reward(&answer("B."), &gold).unwrap(), 1.0);
        assert_eq!(mcq_accuracy_reward(&answer("(B)"), &gold).unwrap(), 1.0);
        assert_eq!(mcq_accuracy_reward(&answer("B:"), &gold).unwrap(), 1.0);
        assert_eq!(mcq_accuracy_reward(&answer("C"), &gold).unwrap(), 0.0);
        assert_eq!(mcq_accuracy_reward(&answer("Bee"), &gold).unwrap(), 0.0);
        assert_eq!(
            mcq_accuracy_reward(&parse_text("no tags"), &gold).unwrap(),
            0.0
        );
    }

    #[test]
    fn mcq_accuracy_rejects_open_ended_gold() {
        let gold = GoldLabels::oe("3 m/s", "m/s", "kinematics");
        assert!(matches!(
            mcq_accuracy_reward(&answer("A"), &gold),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn principle_overlap_cases() {
        let sw = Stopwords::from_words(["the", "of"]).unwrap();
        assert_eq!(
            principle_overlap_reward("the laws of thermodynamics apply", "Laws of Thermodynamics", &sw),
            1.0
        );
        assert_eq!(
            principle_overlap_reward("conservation of energy", "Laws of Thermodynamics", &sw),
            0.0
        );
        assert_eq!(principle_overlap_reward("", "anything at all", &sw), 0.0);
    }

    #[test]
    fn principle_overlap_with_shipped_list() {
        let sw = Stopwords::default_v1();
        assert!(sw.len() >= 50);
        assert_eq!(
            principle_overlap_reward("Newton's second law of motion", "Newton's Second Law", &sw),
            1.0
        );
        // only "of" and "the" shared
        assert_eq!(
            principle_overlap_reward("law of the lever", "conservation of the momentum", &sw),
            0.0
        );
    }

    #[test]
    fn unit_cases() {
        assert_eq!(unit_consistency_reward("Joules", "joule"), 1.0);
        assert_eq!(unit_consistency_reward("m", "meters"), 0.0);
        assert_eq!(unit_consistency_reward("n", "n"), 1.0);
        assert_eq!(unit_consistency_reward("N", "n"), 1.0);
        assert_eq!(unit_consistency_reward("", "m"), 0.0);
        assert_eq!(unit_consistency_reward("  meters   per second ", "Meters per second"), 1.0);
        // the literal substring rule does not equate these
        assert_eq!(unit_consistency_reward("m/s", "meters per second"), 0.0);
    }

    #[test]
    fn length_penalty_cases() {
        assert_eq!(length_penalty(&Completion::new("", 0)), 0.0);
        assert_eq!(length_penalty_chars(100), 0.025);
        assert_eq!(length_penalty_chars(4000), 0.05);
        assert_eq!(length_penalty_chars(100_000), 0.05);
    }

    fn comps(
        r_a: f64,
        r_p: f64,
        r_u: f64,
        r_reason: f64,
        r_f: f64,
        len: usize,
        format: AnswerFormat,
        trace: bool,
    ) -> RubricComponents {
        RubricComponents {
            r_a,
            r_p,
            r_u,
            r_reason,
            r_f,
            char_length: len,
            format,
            has_reasoning_trace: trace,
        }
    }

    #[test]
    fn rubric_examples() {
        let perfect = comps(1.0, 1.0, 1.0, 1.0, 1.0, 0, AnswerFormat::Oe, true);
        assert_eq!(rubric_reward(&perfect).unwrap().score, 1.0);

        let soft = comps(1.0, 0.0, 0.0, 0.0, 1.0, 0, AnswerFormat::Oe, true);
        let s = rubric_reward(&soft).unwrap();
        assert!(s.soft_penalty_applied);
        assert_eq!(s.score, 0.36);

        let mcq = comps(1.0, 1.0, 1.0, 0.0, 1.0, 2000, AnswerFormat::Mcq, true);
        let s = rubric_reward(&mcq).unwrap();
        assert!(!s.soft_penalty_applied);
        assert!((s.score - 0.80).abs() < 1e-12);
    }

    #[test]
    fn mcq_soft_penalty_needs_missing_trace() {
        let c = comps(1.0, 1.0, 1.0, 0.0, 0.75, 0, AnswerFormat::Mcq, false);
        let s = rubric_reward(&c).unwrap();
        assert!(s.soft_penalty_applied);
        assert!((s.score - 0.6 * 0.825).abs() < 1e-12);
    }

    #[test]
    fn rubric_rejects_out_of_range() {
        let c = comps(1.5, 1.0, 1.0, 1.0, 1.0, 0, AnswerFormat::Oe, true);
        assert!(rubric_reward(&c).is_err());
        let c = comps(1.0, 0.5, 1.0, 1.0, 1.0, 0, AnswerFormat::Oe, true);
        assert!(rubric_reward(&c).is_err());
        let c = comps(1.0, 1.0, 1.0, 0.5, 1.0, 0, AnswerFormat::Mcq, true);
        assert!(rubric_reward(&c).is_err());
    }

    #[test]
    fn stopword_file_rules() {
        assert!(Stopwords::parse("").is_err());
        assert!(Stopwords::parse("The\n").is_err());
        assert_eq!(Stopwords::parse("# c\nthe\n\nof\n").unwrap().len(), 2);
    }

    fn any_components() -> impl Strategy<Value = RubricComponents> {
        (
            0.0f64..=1.0,
            prop::bool::ANY,
            prop::bool::ANY,
            0.0f64..=1.0,
            0usize..=4,
            0usize..10_000,
            prop::bool::ANY,
            prop::bool::ANY,
        )
            .prop_map(|(r_a, p, u, reason, f, len, oe, trace)| {
                let format = if oe { AnswerFormat::Oe } else { AnswerFormat::Mcq };
                comps(
                    r_a,
                    p as u8 as f64,
                    u as u8 as f64,
                    if oe { reason } else { 0.0 },
                    f as f64 / 4.0,
                    len,
                    format,
                    trace,
                )
            })
    }

    proptest! {
        #[test]
        fn rubric_in_unit_interval(c in any_components()) {
            let s = rubric_reward(&c).unwrap().score;
            prop_assert!((0.0..=1.0).contains(&s));
        }

        #[test]
        fn rubric_monotone_in_each_component(c in any_components(), which in 0usize..5, bump in 0.0f64..=1.0) {
            let before = rubric_reward(&c).unwrap();
            let mut up = c.clone();
            match which {
                0 => up.r_a = (up.r_a + bump).min(1.0),
                1 => up.r_p = 1.0,
                2 => up.r_u = 1.0,
                3 => if up.format == AnswerFormat::Oe && up.r_reason > 0.0 {
                    up.r_reason = (up.r_reason + bump).min(1.0)
                },
                _ => up.r_f = (up.r_f + 0.25).min(1.0),
            }
            let after = rubric_reward(&up).unwrap();
            prop_assume!(after.soft_penalty_applied == before.soft_penalty_applied);
            prop_assert!(after.score >= before.score);
        }

        #[test]
        fn unit_symmetric_for_long_strings(a in "[a-z/ ]{3,12}", b in "[a-z/ ]{3,12}") {
            prop_assume!(normalize_unit(&a).len() > 2 && normalize_unit(&b).len() > 2);
            prop_assert_eq!(unit_consistency_reward(&a, &b), unit_consistency_reward(&b, &a));
        }

        #[test]
        fn principle_symmetric_and_case_insensitive(a in "[a-zA-Z ,.'-]{0,40}", b in "[a-zA-Z ,.'-]{0,40}") {
            let sw = Stopwords::default_v1();
            let r = principle_overlap_reward(&a, &b, &sw);
            prop_assert_eq!(r, principle_overlap_reward(&b, &a, &sw));
            prop_assert_eq!(r, principle_overlap_reward(&a.to_uppercase(), &b, &sw));
            let stripped: String = a.chars().map(|c| if c.is_alphanumeric() { c } else { ' ' }).collect();
            prop_assert_eq!(r, principle_overlap_reward(&stripped, &b, &sw));
        }

        #[test]
        fn length_penalty_monotone_capped(a in 0usize..20_000, b in 0usize..20_000) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(length_penalty_chars(lo) <= length_penalty_chars(hi));
            prop_assert!(length_penalty_chars(hi) <= LENGTH_PENALTY_CAP);
        }
    }
}
