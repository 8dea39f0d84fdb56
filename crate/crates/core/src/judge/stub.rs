//! Deterministic rule-based judge for offline runs.
//!
//! Graded answers: exact normalized match scores 2, content-word overlap of
//! at least one half scores 1, anything else 0. Principle and unit use the
//! same matchers as the rule-based rewards.

use std::collections::BTreeSet;

use serde::Deserialize;

use super::backend::{ChatBackend, ChatRequest, JudgeTask};
use crate::error::{Error, Result};
use crate::rule_rewards::{
    normalize_unit, principle_overlap_reward, unit_consistency_reward, words, Stopwords,
};

/// Offline judge. Replies in the same layouts a live judge is asked for.
#[derive(Debug, Clone, Default)]
pub struct StubJudge {
    stopwords: Stopwords,
}

impl StubJudge {
    pub fn new() -> Self {
        Self::default()
    }
}

/// User payload sent to the rubric jury.
#[derive(Debug, Deserialize)]
pub(crate) struct RubricPayload {
    #[allow(dead_code)]
    pub question: String,
    pub reference: ReferenceFields,
    pub response: ResponseFields,
}

#[derive(Debug, Deserialize)]
pub(crate) struct ReferenceFields {
    pub answer: String,
    pub unit: String,
    pub principle: String,
}

#[derive(Debug, Deserialize)]
pub(crate) struct ResponseFields {
    pub reasoning: Option<String>,
    pub answer: Option<String>,
    pub unit: Option<String>,
    pub principle: Option<String>,
}

fn content_words(s: &str, stopwords: &Stopwords) -> BTreeSet<String> {
    let all = words(s);
    let content: BTreeSet<String> = all.iter().filter(|w| !stopwords.contains(w)).cloned().collect();
    if content.is_empty() {
        all
    } else {
        content
    }
}

/// |A ∩ B| / min(|A|, |B|) over content words; 0 when either side is empty.
pub fn overlap_ratio(a: &str, b: &str, stopwords: &Stopwords) -> f64 {
    let a = content_words(a, stopwords);
    let b = content_words(b, stopwords);
    let denom = a.len().min(b.len());
    if denom == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / denom as f64
}

fn normalize_answer(s: &str) -> String {
    normalize_unit(s)
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

/// 2 for an exact normalized match, 1 for overlap ≥ 0.5, else 0.
pub fn graded_match(predicted: &str, reference: &str, stopwords: &Stopwords) -> u8 {
    let p = normalize_answer(predicted);
    let r = normalize_answer(reference);
    if p.is_empty() || r.is_empty() {
        0
    } else if p == r {
        2
    } else if overlap_ratio(&p, &r, stopwords) >= 0.5 {
        1
    } else {
        0
    }
}

impl StubJudge {
    fn rubric(&self, req: &ChatRequest) -> Result<String> {
        let payload: RubricPayload = serde_json::from_str(req.user_text())
            .map_err(|e| Error::Contract(format!("stub judge got a malformed rubric payload: {e}")))?;
        let resp = &payload.response;
        let reference = &payload.reference;
        let reasoning_words = resp.reasoning.as_deref().map_or(0, |r| r.split_whitespace().count());
        let reasoning = match reasoning_words {
            0 => 0,
            1..=7 => 1,
            _ => 2,
        };
        let mut correctness = graded_match(
            resp.answer.as_deref().unwrap_or(""),
            &reference.answer,
            &self.stopwords,
        );
        if reasoning == 0 {
            correctness = correctness.min(1);
        }
        let principle = principle_overlap_reward(
            resp.principle.as_deref().unwrap_or(""),
            &reference.principle,
            &self.stopwords,
        ) as u8;
        let unit = unit_consistency_reward(resp.unit.as_deref().unwrap_or(""), &reference.unit) as u8;
        Ok(format!(
            "CORRECTNESS: {correctness}\nPRINCIPLE: {principle}\nUNIT: {unit}\nREASONING: {reasoning}"
        ))
    }

    fn equivalence(&self, req: &ChatRequest) -> Result<String> {
        let text = req.user_text();
        let (llm, gold) = text
            .strip_prefix("LLM: ")
            .and_then(|rest| rest.split_once(" | Ground Truth: "))
            .ok_or_else(|| Error::Contract("stub judge got a malformed equivalence payload".into()))?;
        Ok(if graded_match(llm, gold, &self.stopwords) >= 1 {
            "True".into()
        } else {
            "False".into()
        })
    }

    fn unit_extract(&self, req: &ChatRequest) -> Result<String> {
        let prompt = req.system_text();
        let subfield = line_after(prompt, "Subfield: ").unwrap_or("unknown");
        let question = section(prompt, "Question:", "Options:").to_lowercase();
        let unit = guess_unit_type(&question);
        Ok(serde_json::json!({ "principle": subfield, "unit_type": unit }).to_string())
    }

    fn ontology(&self, req: &ChatRequest) -> Result<String> {
        let prompt = req.system_text();
        let batch = section(prompt, "Input:", "Return ONLY JSON:");
        let mut clusters: std::collections::BTreeMap<String, Vec<String>> = Default::default();
        for item in batch.lines().filter_map(|l| l.trim().strip_prefix("- ")) {
            let name = keyword_cluster(&item.to_lowercase())
                .map(|(_, snake)| snake.to_string())
                .unwrap_or_else(|| "other".to_string());
            clusters.entry(name).or_default().push(item.to_string());
        }
        Ok(serde_json::to_string(&clusters)?)
    }

    fn mapping(&self, req: &ChatRequest) -> Result<String> {
        let prompt = req.system_text();
        let categories: Vec<&str> = section(prompt, "Categories:", "Rules:")
            .lines()
            .map(|l| l.trim().trim_start_matches("- ").trim())
            .filter(|l| !l.is_empty())
            .collect();
        let raw = section(prompt, "Input:", "Subfield:").to_lowercase();
        if let Some((display, snake)) = keyword_cluster(&raw) {
            let hit = categories.iter().find(|c| {
                let c = c.to_lowercase();
                c == display.to_lowercase() || c == snake
            });
            if let Some(c) = hit {
                return Ok(c.to_string());
            }
        }
        let best = categories
            .iter()
            .map(|c| (overlap_ratio(&raw, &c.replace('_', " "), &self.stopwords), *c))
            .filter(|(score, _)| *score > 0.0)
            .max_by(|a, b| a.0.total_cmp(&b.0));
        Ok(best.map_or("none".to_string(), |(_, c)| c.to_string()))
    }
}

impl ChatBackend for StubJudge {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        match request.task {
            JudgeTask::RubricJury => self.rubric(request),
            JudgeTask::Equivalence => self.equivalence(request),
            JudgeTask::UnitExtract => self.unit_extract(request),
            JudgeTask::Ontology => self.ontology(request),
            JudgeTask::Mapping => self.mapping(request),
        }
    }

    fn is_offline(&self) -> bool {
        true
    }
}

fn line_after<'a>(text: &'a str, prefix: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(prefix)).map(str::trim)
}

/// Text between a header line and the next header, trimmed.
fn section<'a>(text: &'a str, start: &str, end: &str) -> &'a str {
    let Some(i) = text.find(start) else {
        return "";
    };
    let rest = &text[i + start.len()..];
    let stop = rest.find(end).unwrap_or(rest.len());
    rest[..stop].trim()
}

/// Keyword table: (keywords, display name, snake_case name).
const UNIT_KEYWORDS: &[(&[&str], &str, &str)] = &[
    (&["ratio", "dimensionless", "count", "number", "efficiency", "percent"], "Dimensionless / Ratios / Counts", "dimensionless"),
    (&["acceleration", "m/s^2", "m/s²"], "Acceleration", "acceleration"),
    (&["speed", "velocity", "m/s", "km/h"], "Speed / Velocity", "speed_velocity"),
    (&["frequency", "hz", "rad/s"], "Frequency / Angular Frequency", "frequency"),
    (&["wavelength", "magnification", "refractive", "focal"], "Optics (wavelength, magnification, refractive index)", "optics"),
    (&["angle", "degree", "radian"], "Angle", "angle"),
    (&["torque", "n·m", "n*m"], "Torque / Rotational Mechanics", "torque"),
    (&["force", "newton", "tension"], "Force", "force"),
    (&["power", "watt", "intensity"], "Power / Intensity (W)", "power_intensity"),
    (&["energy", "joule", "work", "ev"], "Energy", "energy"),
    (&["pressure", "pascal", "atm"], "Pressure", "pressure"),
    (&["temperature", "kelvin", "celsius"], "Temperature", "temperature"),
    (&["voltage", "volt", "potential", "emf"], "Voltage / Electric Potential", "voltage"),
    (&["current", "ampere", "amp"], "Electric Current", "current"),
    (&["resistance", "ohm"], "Resistance", "resistance"),
    (&["capacitance", "farad", "inductance", "henry"], "Capacitance / Inductance", "capacitance_inductance"),
    (&["magnetic", "tesla", "weber"], "Magnetic Field / Flux", "magnetic_field"),
    (&["electric field", "n/c", "v/m", "flux"], "Electric Field / Flux", "electric_field"),
    (&["charge", "coulomb"], "Electric Charge / Charge Density", "charge"),
    (&["decibel", "db", "sound"], "Sound / Decibel / Acoustic Intensity", "sound"),
    (&["mass", "momentum", "kg"], "Mass / Momentum", "mass_momentum"),
    (&["time", "second", "period"], "Time", "time"),
    (&["length", "distance", "meter", "metre", "height", "radius", "cm", "km"], "Length / Distance", "length_distance"),
    (&["entropy", "heat"], "Thermodynamics / Heat / Entropy", "thermodynamics"),
    (&["nuclear", "decay", "half-life", "particle"], "Nuclear & Particle Physics", "nuclear_particle"),
    (&["planck", "action", "quantum"], "Quantum Mechanics / Action", "quantum"),
];

fn keyword_cluster(text: &str) -> Option<(&'static str, &'static str)> {
    let toks = words(text);
    UNIT_KEYWORDS.iter().find_map(|(keys, display, snake)| {
        let hit = keys.iter().any(|k| {
            if k.chars().all(char::is_alphanumeric) {
                toks.contains(*k) || toks.iter().any(|t| t.starts_with(k) && k.len() > 3)
            } else {
                text.contains(k)
            }
        });
        hit.then_some((*display, *snake))
    })
}

fn guess_unit_type(question: &str) -> String {
    match keyword_cluster(question) {
        Some((display, _)) => display.to_string(),
        None => "unknown".to_string(),
    }
}
